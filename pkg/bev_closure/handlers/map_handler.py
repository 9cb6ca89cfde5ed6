import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional

from bev_closure.closures.detection import (
    ClosureCandidate,
    ClosureIndex,
    LoopClosure,
    ScanClosure,
    expand_to_scans,
    ransac_verify,
)
from bev_closure.config import PipelineConfig
from bev_closure.database.hbst import DescriptorDatabase, MapRecord, MatchVote
from bev_closure.errors import StageError
from bev_closure.geometry.transforms import SE3
from bev_closure.imaging.bev import DensityImage, project
from bev_closure.imaging.features import BinaryDescriptor, detect_and_describe, prune_self_similar
from bev_closure.mapping.ground import GroundSolveReport, align_local_map
from bev_closure.mapping.local_mapper import LocalMap
from bev_closure.state import StateManager

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ProcessedMap:
    local_map: LocalMap
    aligned: LocalMap
    image: DensityImage
    ground: Optional[GroundSolveReport] = None
    descriptors: List[BinaryDescriptor] = field(default_factory=list)
    votes: List[MatchVote] = field(default_factory=list)
    closures: List[LoopClosure] = field(default_factory=list)
    scan_closures: List[ScanClosure] = field(default_factory=list)

    @property
    def ground_transform(self) -> SE3:
        return self.ground.transform if self.ground is not None else SE3.identity()

    def record(self) -> MapRecord:
        return MapRecord(
            map_index=self.local_map.index,
            resolution=self.image.resolution,
            origin_cell=self.image.origin_cell,
            ground_transform=self.ground_transform,
            scan_indices=list(self.local_map.scan_indices),
            scan_poses=self.local_map.local_scan_poses(),
        )


class MapHandler:
    """
    ローカルマップ1つ分のステージを順に実行する

    query_database が渡されたとき（マルチセッション）はそれだけを検索し、どのデータベースにも挿入しない。
    """

    def __init__(
        self,
        config: PipelineConfig,
        database: DescriptorDatabase,
        closure_index: Optional[ClosureIndex] = None,
        state: Optional[StateManager] = None,
        query_database: Optional[DescriptorDatabase] = None,
    ):
        self.config = config
        self.database = database
        self.query_database = query_database
        self.closure_index = closure_index if closure_index is not None else ClosureIndex()
        self.state = state

    @property
    def multi_session(self) -> bool:
        return self.query_database is not None

    @contextmanager
    def _stage(self, map_index: int, stage: str):
        if self.state:
            self.state.update_stage(map_index, stage)
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            logger.error("Stage failed", extra={"map_index": map_index, "stage": stage}, exc_info=True)
            if self.state:
                self.state.set_error(map_index, f"{stage}: {e}")
            raise StageError(map_index, stage, e) from e

    def prepare(self, local_map: LocalMap) -> ProcessedMap:
        """地面合わせと BEV 投影まで"""
        index = local_map.index
        ground = self.config.ground
        report = None
        aligned = local_map
        with self._stage(index, "ground"):
            if ground.enabled:
                aligned, report = align_local_map(
                    local_map,
                    cell=ground.cell,
                    max_iters=ground.max_iters,
                    inlier_dist=ground.inlier_dist,
                    convergence_eps=ground.eps,
                )
                if self.state:
                    self.state.update_ground(index, report.to_dict())

        with self._stage(index, "project"):
            image = project(aligned, self.config.nu_b)
            self.closure_index.add_density_image(image)

        return ProcessedMap(local_map=local_map, aligned=aligned, image=image, ground=report)

    def process(self, local_map: LocalMap) -> ProcessedMap:
        processed = self.prepare(local_map)
        index = local_map.index
        features = self.config.feature

        with self._stage(index, "features"):
            detected = detect_and_describe(processed.image, features.fast_threshold, features.max_features)
            kept = prune_self_similar(detected, self.config.tau_pr) if features.prune else detected
            processed.descriptors = kept
            if self.state:
                self.state.update_descriptors(index, len(detected), len(kept))

        with self._stage(index, "query"):
            if self.multi_session:
                processed.votes = self.query_database.query(kept, self.config.tau_match, exclude_recent=None)
            else:
                processed.votes = self.database.query(kept, self.config.tau_match, self.config.exclude_recent)

        if not self.multi_session:
            with self._stage(index, "insert"):
                self.database.insert(kept, processed.record())

        reference_db = self.query_database if self.multi_session else self.database
        with self._stage(index, "verify"):
            for vote in processed.votes:
                closure = self._verify(processed, vote, reference_db.maps[vote.reference_map])
                if closure is not None:
                    processed.closures.append(closure)
                    self.closure_index.add(closure)
                    if self.state:
                        self.state.add_closure(index, closure.reference_map)

        with self._stage(index, "expand"):
            query_poses = local_map.local_scan_poses()
            for closure in processed.closures:
                record = reference_db.maps[closure.reference_map]
                processed.scan_closures.extend(expand_to_scans(
                    closure,
                    query_poses,
                    record.scan_poses,
                    self.config.tau_d,
                    query_scans=local_map.scan_indices,
                    reference_scans=record.scan_indices,
                ))
            if self.state:
                self.state.add_scan_closures(len(processed.scan_closures))

        logger.info("Local map processed", extra={
            "map_index": index,
            "descriptors": len(processed.descriptors),
            "candidates": len(processed.votes),
            "closures": len(processed.closures),
            "scan_closures": len(processed.scan_closures),
            "event": "map_processed",
        })
        return processed

    def _verify(self, processed: ProcessedMap, vote: MatchVote, record: MapRecord) -> Optional[LoopClosure]:
        candidate = ClosureCandidate(
            vote=vote,
            resolution=self.config.nu_b,
            query_origin=processed.image.origin_cell,
            reference_origin=record.origin_cell,
        )
        return ransac_verify(
            candidate,
            iterations=self.config.n_ransac,
            inlier_tol=self.config.inlier_tol,
            gamma=self.config.gamma,
            seed=self.config.seed,
            ground_q=processed.ground_transform,
            ground_r=record.ground_transform,
        )
