import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import yaml

from bev_closure.errors import InputFormatError
from bev_closure.geometry.transforms import SE3, PointCloud
from bev_closure.io.readers import read_poses, read_scan
from bev_closure.mapping.local_mapper import ScanRecord

logger = logging.getLogger(__name__)

SCAN_SUFFIX = ".bin"


@dataclass
class SessionManifest:
    scan_directory: Path
    pose_file: Path
    ground_truth_pose_file: Optional[Path] = None
    session_id: str = "session"

    def __post_init__(self):
        self.scan_directory = Path(self.scan_directory)
        self.pose_file = Path(self.pose_file)
        if self.ground_truth_pose_file is not None:
            self.ground_truth_pose_file = Path(self.ground_truth_pose_file)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "scan_directory": str(self.scan_directory),
            "pose_file": str(self.pose_file),
            "ground_truth_pose_file": str(self.ground_truth_pose_file) if self.ground_truth_pose_file else None,
        }

    def scan_files(self) -> List[Path]:
        if not self.scan_directory.is_dir():
            raise InputFormatError(f"scan directory not found: {self.scan_directory}")
        return sorted(self.scan_directory.glob(f"*{SCAN_SUFFIX}"))

    def poses(self) -> List[SE3]:
        return read_poses(self.pose_file)

    def ground_truth(self) -> Optional[Dict[int, SE3]]:
        """スキャン番号 → 真値の姿勢。真値がなければ None"""
        if self.ground_truth_pose_file is None:
            return None
        return dict(enumerate(read_poses(self.ground_truth_pose_file)))

    def validate(self) -> Tuple[List[Path], List[SE3]]:
        files = self.scan_files()
        if not files:
            raise InputFormatError(f"no scans in {self.scan_directory}")
        poses = self.poses()
        if len(poses) != len(files):
            raise InputFormatError(
                f"{self.pose_file}: {len(poses)} poses for {len(files)} scans in {self.scan_directory}"
            )
        return files, poses

    def scans(self) -> Iterator[ScanRecord]:
        """オドメトリ姿勢付きでスキャンを順に読む（番号はファイル名順の位置）"""
        files, poses = self.validate()
        for index, (path, pose) in enumerate(zip(files, poses)):
            yield ScanRecord(index=index, cloud=read_scan(path), pose=pose)

    def clouds(self) -> Iterator[Tuple[int, PointCloud]]:
        for index, path in enumerate(self.scan_files()):
            yield index, read_scan(path)


def load_manifest(path: Union[str, Path]) -> SessionManifest:
    """相対パスはマニフェストのあるディレクトリから解決する"""
    path = Path(path)
    if not path.is_file():
        raise InputFormatError(f"manifest not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise InputFormatError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise InputFormatError(f"{path}: manifest must be a mapping")
    for key in ("scan_directory", "pose_file"):
        if key not in data:
            raise InputFormatError(f"{path}: missing '{key}'")

    base = path.parent

    def resolve(value):
        return None if value is None else base / Path(value)

    return SessionManifest(
        scan_directory=resolve(data["scan_directory"]),
        pose_file=resolve(data["pose_file"]),
        ground_truth_pose_file=resolve(data.get("ground_truth_pose_file")),
        session_id=str(data.get("session_id", path.stem)),
    )


def save_manifest(manifest: SessionManifest, path: Union[str, Path]) -> Path:
    """マニフェストと同じディレクトリからの相対パスで書く"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def relative(value: Optional[Path]):
        if value is None:
            return None
        try:
            return str(Path(value).resolve().relative_to(base))
        except ValueError:
            return str(Path(value).resolve())

    data = {
        "session_id": manifest.session_id,
        "scan_directory": relative(manifest.scan_directory),
        "pose_file": relative(manifest.pose_file),
        "ground_truth_pose_file": relative(manifest.ground_truth_pose_file),
    }
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path
