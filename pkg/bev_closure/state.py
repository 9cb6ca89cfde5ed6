import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

logger = logging.getLogger(__name__)

STAGES = ("accumulate", "ground", "project", "features", "query", "insert", "verify", "expand")


@dataclass
class MapState:
    map_index: int
    first_scan: int
    last_scan: int
    scan_count: int
    partial: bool = False
    stage: str = "accumulate"
    points: int = 0
    descriptors_detected: int = 0
    descriptors_kept: int = 0
    ground: Optional[dict] = None
    closures: List[int] = field(default_factory=list)
    last_error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SessionState:
    session_id: str
    started_at: str
    finished_at: Optional[str] = None
    scans: int = 0
    closures: int = 0
    scan_closures: int = 0
    maps: List[MapState] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class StateManager:
    """セッション内のローカルマップごとの処理状況を記録する"""

    def __init__(self, session_id: str):
        self._session = SessionState(session_id=session_id, started_at=datetime.now(timezone.utc).isoformat())
        self._maps: Dict[int, MapState] = {}

    @property
    def session(self) -> SessionState:
        return self._session

    def add_map(self, map_index: int, scan_indices: List[int], partial: bool, points: int) -> MapState:
        if map_index in self._maps:
            logger.warning("Map already registered", extra={"map_index": map_index})
            return self._maps[map_index]

        state = MapState(
            map_index=map_index,
            first_scan=scan_indices[0],
            last_scan=scan_indices[-1],
            scan_count=len(scan_indices),
            partial=partial,
            points=points,
        )
        self._maps[map_index] = state
        self._session.maps.append(state)
        self._session.scans += len(scan_indices)
        return state

    def get_state(self, map_index: int) -> Optional[MapState]:
        return self._maps.get(map_index)

    def update_stage(self, map_index: int, stage: str):
        state = self._maps.get(map_index)
        if state:
            state.stage = stage

    def update_ground(self, map_index: int, report: dict):
        state = self._maps.get(map_index)
        if state:
            state.ground = report

    def update_descriptors(self, map_index: int, detected: int, kept: int):
        state = self._maps.get(map_index)
        if state:
            state.descriptors_detected = detected
            state.descriptors_kept = kept

    def add_closure(self, map_index: int, reference_map: int):
        state = self._maps.get(map_index)
        if state:
            state.closures.append(reference_map)
            self._session.closures += 1

    def add_scan_closures(self, count: int):
        self._session.scan_closures += count

    def set_error(self, map_index: int, error: str):
        state = self._maps.get(map_index)
        if state:
            state.last_error = error
            logger.error("Error recorded for map", extra={"map_index": map_index, "error": error})

    def finish(self):
        self._session.finished_at = datetime.now(timezone.utc).isoformat()

    def partition(self) -> List[List[int]]:
        """マップごとのスキャン番号（連続区間）"""
        return [list(range(m.first_scan, m.last_scan + 1)) for m in self._session.maps]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self._session.to_dict(), indent=2))
        return path


def load_partition(path: Union[str, Path]) -> List[List[int]]:
    """session_state.json からローカルマップのスキャン分割を読む"""
    data = json.loads(Path(path).read_text())
    return [list(range(m["first_scan"], m["last_scan"] + 1)) for m in data["maps"]]
