import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from bev_closure.closures.detection import ClosureIndex, LoopClosure, ScanClosure
from bev_closure.config import PipelineConfig
from bev_closure.database import storage
from bev_closure.database.hbst import DescriptorDatabase
from bev_closure.errors import ConfigError, EvaluationError, StageError
from bev_closure.evaluation import reports
from bev_closure.evaluation.metrics import PrPoint, pr_curve, relative_fitness, summarize
from bev_closure.evaluation.references import (
    check_poses,
    reference_cross_closures,
    reference_map_closures,
    reference_scan_closures,
)
from bev_closure.evaluation.stress import DEFAULT_MAGNITUDES, DEFAULT_TRIALS, StressRow, ground_alignment_stress, planar_map
from bev_closure.geometry.transforms import SE3
from bev_closure.handlers.map_handler import MapHandler
from bev_closure.imaging.bev import write_pgm
from bev_closure.io.manifest import SessionManifest
from bev_closure.mapping.ground import align_local_map
from bev_closure.mapping.local_mapper import LocalMap, LocalMapper, ScanRecord, accumulate
from bev_closure.state import SessionState, StateManager, load_partition

logger = logging.getLogger(__name__)

ClosureRow = Tuple[int, int, int, SE3]


@dataclass(eq=False)
class SessionResult:
    session_id: str
    closures: List[LoopClosure]
    scan_closures: List[ScanClosure]
    database: DescriptorDatabase
    closure_index: ClosureIndex
    state: SessionState
    partition: List[List[int]] = field(default_factory=list)
    metrics: Optional[dict] = None

    def closure_rows(self) -> List[ClosureRow]:
        return [(c.query_map, c.reference_map, c.inliers, c.t_qr) for c in self.closures]


def _check_catalog(database: DescriptorDatabase, config: PipelineConfig):
    for record in database.maps.values():
        if not math.isclose(record.resolution, config.nu_b):
            raise ConfigError(
                f"database map {record.map_index} was built with nu_b={record.resolution}, config has {config.nu_b}"
            )


def _local_maps(scans: Iterable[ScanRecord], config: PipelineConfig, state: StateManager) -> Iterator[LocalMap]:
    """蓄積ステージの失敗も StageError にする"""
    maps = accumulate(scans, tau_c=config.tau_c, max_range=config.max_range, voxel_size=config.nu_map)
    next_index = 0
    while True:
        try:
            local_map = next(maps)
        except StopIteration:
            return
        except Exception as e:
            logger.error("Stage failed", extra={"map_index": next_index, "stage": "accumulate"}, exc_info=True)
            raise StageError(next_index, "accumulate", e) from e
        state.add_map(local_map.index, local_map.scan_indices, local_map.partial, len(local_map))
        next_index = local_map.index + 1
        yield local_map


def run_session(
    manifest: SessionManifest,
    config: PipelineConfig,
    output_dir: Optional[Union[str, Path]] = None,
    loaded_db: Optional[DescriptorDatabase] = None,
    save_db: Optional[Union[str, Path]] = None,
    reference_manifest: Optional[SessionManifest] = None,
    bev_dir: Optional[Union[str, Path]] = None,
) -> SessionResult:
    """
    ローカルマップごとに 蓄積 → 地面合わせ → 投影 → 特徴 → 検索/挿入 → 検証 → スキャン展開 を実行する

    loaded_db を渡すとマルチセッション（保存済みデータベースを検索するだけで、挿入はしない）。
    真値がマニフェストにあれば評価指標も出力する。
    bev_dir を渡すと各マップの BEV 密度画像を PGM で書き出す。
    """
    manifest.validate()
    if loaded_db is not None:
        _check_catalog(loaded_db, config)
        if save_db is not None:
            raise ConfigError("cannot save a database while querying a loaded one")
    ground_truth = manifest.ground_truth()
    if ground_truth is not None:
        check_poses(range(len(manifest.scan_files())), ground_truth)

    logger.info("Session starting", extra={
        "session_id": manifest.session_id,
        "multi_session": loaded_db is not None,
        "event": "session_starting",
    })

    state = StateManager(manifest.session_id)
    database = DescriptorDatabase()
    handler = MapHandler(config, database, state=state, query_database=loaded_db)
    closures: List[LoopClosure] = []
    scan_closures: List[ScanClosure] = []
    for local_map in _local_maps(manifest.scans(), config, state):
        processed = handler.process(local_map)
        closures.extend(processed.closures)
        scan_closures.extend(processed.scan_closures)
        if bev_dir is not None:
            write_pgm(processed.image, Path(bev_dir) / f"map_{local_map.index:04d}.pgm")
    state.finish()

    result = SessionResult(
        session_id=manifest.session_id,
        closures=closures,
        scan_closures=scan_closures,
        database=database,
        closure_index=handler.closure_index,
        state=state.session,
        partition=state.partition(),
    )

    if output_dir is not None:
        output_dir = Path(output_dir)
        reports.write_closures(output_dir / "closures.csv", closures)
        reports.write_scan_closures(output_dir / "scan_closures.csv", scan_closures)
        state.save(output_dir / "session_state.json")
    if save_db is not None:
        storage.save(database, save_db)

    if ground_truth is not None:
        reference_partition = None
        if loaded_db is not None and reference_manifest is not None:
            reference_partition = [loaded_db.maps[m].scan_indices for m in sorted(loaded_db.maps)]
        if loaded_db is None or reference_partition is not None:
            result.metrics = evaluate_session(
                manifest,
                config,
                result.partition,
                result.closure_rows(),
                [(s.query_scan, s.reference_scan, s.inliers) for s in scan_closures],
                reference_manifest=reference_manifest,
                reference_partition=reference_partition,
            )
            if output_dir is not None:
                write_metrics(output_dir, result.metrics)

    logger.info("Session finished", extra={
        "session_id": manifest.session_id,
        "maps": len(result.partition),
        "closures": len(closures),
        "scan_closures": len(scan_closures),
        "event": "session_finished",
    })
    return result


def build_database(manifest: SessionManifest, config: PipelineConfig, path: Union[str, Path]) -> SessionResult:
    """参照セッションを処理してデータベースファイルを書く"""
    return run_session(manifest, config, save_db=path)


def ground_truth_scans(manifest: SessionManifest, ground_truth: Mapping[int, SE3]) -> Iterator[ScanRecord]:
    for index, cloud in manifest.clouds():
        yield ScanRecord(index=index, cloud=cloud, pose=ground_truth[index])


def build_partitioned_maps(
    scans: Iterable[ScanRecord],
    partition: Sequence[Sequence[int]],
    config: PipelineConfig,
) -> List[LocalMap]:
    """与えられたスキャン分割どおりにローカルマップを作る（真値の姿勢で参照を作るとき用）"""
    mapper = LocalMapper(tau_c=math.inf, max_range=config.max_range, voxel_size=config.nu_map)
    boundaries = {part[-1] for part in partition if part}
    maps = []
    for scan in scans:
        mapper.integrate(scan)
        if scan.index in boundaries:
            maps.append(mapper.flush())
    if len(maps) != len(partition):
        raise EvaluationError(f"partition mismatch: {len(partition)} maps expected, {len(maps)} rebuilt")
    return maps


def _curve_summary(points: Optional[List[PrPoint]], references: int) -> Optional[dict]:
    if points is None:
        return None
    last = points[-1]
    return {
        **summarize(points),
        "references": references,
        "precision": last.precision,
        "recall": last.recall,
        "curve": [p.to_dict() for p in points],
    }


def evaluate_session(
    manifest: SessionManifest,
    config: PipelineConfig,
    partition: Sequence[Sequence[int]],
    closures: Sequence[ClosureRow],
    scan_detections: Sequence[Tuple[int, int, int]],
    reference_manifest: Optional[SessionManifest] = None,
    reference_partition: Optional[Sequence[Sequence[int]]] = None,
) -> dict:
    """
    検出結果を真値と比べる

    同一セッションでは exclude_recent で抑制される近傍の組を参照から除く。
    reference_manifest があるときはセッション間の組で比べ、スキャン単位の評価は行わない。
    """
    ground_truth = manifest.ground_truth()
    if ground_truth is None:
        raise EvaluationError(f"session '{manifest.session_id}' has no ground-truth poses")
    scan_count = len(manifest.scan_files())
    check_poses(range(scan_count), ground_truth)
    query_maps = build_partitioned_maps(ground_truth_scans(manifest, ground_truth), partition, config)

    cross_session = reference_manifest is not None
    scan_refs = None
    if cross_session:
        if reference_partition is None:
            raise EvaluationError("cross-session evaluation needs the reference map partition")
        reference_truth = reference_manifest.ground_truth()
        if reference_truth is None:
            raise EvaluationError(f"session '{reference_manifest.session_id}' has no ground-truth poses")
        reference_maps = build_partitioned_maps(
            ground_truth_scans(reference_manifest, reference_truth), reference_partition, config
        )
        map_refs = reference_cross_closures(query_maps, reference_maps)
    else:
        reference_maps = query_maps
        map_refs = {
            (m, n) for m, n in reference_map_closures(query_maps)
            if abs(n - m) > config.exclude_recent
        }
        scan_refs = reference_scan_closures(
            manifest.clouds(), ground_truth, config.max_range, scan_indices=range(scan_count)
        ).scan_pairs

    map_detections = [(q, r, inliers) for q, r, inliers, _ in closures]
    map_curve = pr_curve(map_detections, map_refs, symmetric=not cross_session) if map_refs else None
    scan_curve = pr_curve(scan_detections, scan_refs) if scan_refs else None
    if map_curve is None:
        logger.warning("No map-level reference closures, skipping map metrics", extra={"session_id": manifest.session_id})

    by_index = {m.index: m for m in reference_maps}
    fitness = [
        relative_fitness(query_maps[q], by_index[r], t_qr.inverse())
        for q, r, _, t_qr in closures
        if q < len(query_maps) and r in by_index
    ]

    metrics = {
        "session_id": manifest.session_id,
        "cross_session": cross_session,
        "closures": len(closures),
        "scan_closures": len(scan_detections),
        "map": _curve_summary(map_curve, len(map_refs)),
        "scan": _curve_summary(scan_curve, len(scan_refs) if scan_refs is not None else 0),
        "fitness": {
            "mean": float(np.mean(fitness)) if fitness else None,
            "pairs": len(fitness),
            "values": fitness,
        },
    }
    logger.info("Session evaluated", extra={
        "session_id": manifest.session_id,
        "map_references": len(map_refs),
        "scan_references": len(scan_refs) if scan_refs is not None else None,
        "mean_fitness": metrics["fitness"]["mean"],
        "event": "session_evaluated",
    })
    return metrics


def write_metrics(output_dir: Union[str, Path], metrics: dict):
    output_dir = Path(output_dir)
    summary = dict(metrics)
    for level, filename in (("scan", "pr_curve.csv"), ("map", "pr_curve_maps.csv")):
        section = metrics.get(level)
        if section is None:
            continue
        points = [PrPoint(**p) for p in section["curve"]]
        reports.write_pr_curve(output_dir / filename, points)
        summary[level] = {k: v for k, v in section.items() if k != "curve"}
    reports.write_summary(output_dir / "summary.json", summary)


def dump_density_images(manifest: SessionManifest, config: PipelineConfig, output_dir: Union[str, Path]) -> List[Path]:
    """地面合わせ後の BEV 密度画像を map_XXXX.pgm として書き出す"""
    output_dir = Path(output_dir)
    state = StateManager(manifest.session_id)
    handler = MapHandler(config, DescriptorDatabase(), state=state)
    paths = []
    for local_map in _local_maps(manifest.scans(), config, state):
        handler.prepare(local_map)
        image = handler.closure_index.density_image(local_map.index)
        paths.append(write_pgm(image, output_dir / f"map_{local_map.index:04d}.pgm"))
    return paths


def run_ground_stress(
    config: PipelineConfig,
    manifest: Optional[SessionManifest] = None,
    planar_maps: int = 0,
    magnitudes: Sequence[float] = DEFAULT_MAGNITUDES,
    trials: int = DEFAULT_TRIALS,
    output_dir: Optional[Union[str, Path]] = None,
) -> List[StressRow]:
    """
    地面合わせの耐性試験

    セッションのマップは先に地面合わせしてから傾ける。planar_maps > 0 なら合成平面も加える。
    """
    rng = np.random.default_rng(config.seed)
    clouds: List[np.ndarray] = [planar_map(rng) for _ in range(planar_maps)]
    if manifest is not None:
        state = StateManager(manifest.session_id)
        ground = config.ground
        for local_map in _local_maps(manifest.scans(), config, state):
            aligned, _ = align_local_map(local_map, ground.cell, ground.max_iters, ground.inlier_dist, ground.eps)
            clouds.append(aligned.points)
    if not clouds:
        raise ConfigError("ground stress needs a session or at least one planar map")

    ground = config.ground
    rows = ground_alignment_stress(
        clouds,
        magnitudes=magnitudes,
        trials=trials,
        cell=ground.cell,
        max_iters=ground.max_iters,
        inlier_dist=ground.inlier_dist,
        convergence_eps=ground.eps,
        rng=rng,
    )
    if output_dir is not None:
        reports.write_stress(Path(output_dir) / "stress.csv", rows)
    return rows


def evaluate_outputs(
    manifest: SessionManifest,
    config: PipelineConfig,
    results_dir: Union[str, Path],
    reference_manifest: Optional[SessionManifest] = None,
    reference_db: Optional[DescriptorDatabase] = None,
) -> dict:
    """書き出し済みの closures.csv / scan_closures.csv / session_state.json から評価し直す"""
    results_dir = Path(results_dir)
    partition = load_partition(results_dir / "session_state.json")
    closures = reports.read_closures(results_dir / "closures.csv")
    scan_detections = reports.read_scan_detections(results_dir / "scan_closures.csv")

    reference_partition = None
    if reference_manifest is not None:
        if reference_db is None:
            raise ConfigError("cross-session evaluation needs the reference database (--db)")
        reference_partition = [reference_db.maps[m].scan_indices for m in sorted(reference_db.maps)]

    metrics = evaluate_session(
        manifest,
        config,
        partition,
        closures,
        scan_detections,
        reference_manifest=reference_manifest,
        reference_partition=reference_partition,
    )
    write_metrics(results_dir, metrics)
    return metrics
