import json
import time
from pathlib import Path

import numpy as np
import pytest

from bev_closure.config import PipelineConfig
from bev_closure.database import storage
from bev_closure.database.hbst import DescriptorDatabase
from bev_closure.errors import ConfigError, EvaluationError, InputFormatError
from bev_closure.evaluation.references import reference_map_closures
from bev_closure.handlers import session
from bev_closure.handlers.map_handler import MapHandler
from bev_closure.io.manifest import SessionManifest
from bev_closure.io.synthetic import generate_synthetic_world, load_world_spec
from bev_closure.io.writers import write_poses, write_scan
from bev_closure.main import EXIT_INPUT_ERROR, EXIT_OK, EXIT_STAGE_FAILURE, main
from bev_closure.mapping.local_mapper import accumulate
from bev_closure.state import StateManager

from helpers import small_config, straight_poses

WORLDS = Path(__file__).resolve().parent.parent / "config" / "worlds"


def synthetic_session(tmp_path_factory, name: str) -> SessionManifest:
    return generate_synthetic_world(load_world_spec(WORLDS / f"{name}.yaml"), tmp_path_factory.mktemp(name))


@pytest.fixture(scope="module")
def corridor(tmp_path_factory):
    return synthetic_session(tmp_path_factory, "corridor")


@pytest.fixture(scope="module")
def corridor_run(corridor, tmp_path_factory):
    output = tmp_path_factory.mktemp("corridor_out")
    started = time.perf_counter()
    result = session.run_session(corridor, PipelineConfig(), output_dir=output)
    return result, output, time.perf_counter() - started


def tiny_world(tmp_path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text("kind: corridor\nseed: 7\nlength: 20.0\nscan_spacing: 1.0\nmax_range: 30.0\n")
    return path


def detected_pairs(result):
    return {(q, r) for q, r, _, _ in result.closure_rows()}


def test_empty_scan_directory_writes_nothing(tmp_path):
    (tmp_path / "scans").mkdir()
    write_poses(tmp_path / "poses.txt", [])
    manifest = SessionManifest(tmp_path / "scans", tmp_path / "poses.txt")
    with pytest.raises(InputFormatError, match="no scans"):
        session.run_session(manifest, PipelineConfig(), output_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_missing_ground_truth_pose_is_reported(tmp_path):
    for index in range(3):
        write_scan(tmp_path / "scans" / f"{index:06d}.bin", np.ones((1, 3)))
    write_poses(tmp_path / "poses.txt", straight_poses(3))
    write_poses(tmp_path / "gt.txt", straight_poses(2))
    manifest = SessionManifest(tmp_path / "scans", tmp_path / "poses.txt", tmp_path / "gt.txt")
    with pytest.raises(EvaluationError, match="ground-truth pose missing for scans: 2"):
        session.run_session(manifest, PipelineConfig())


def test_stress_needs_some_maps():
    with pytest.raises(ConfigError):
        session.run_ground_stress(PipelineConfig())


def test_stress_on_planar_maps(tmp_path):
    rows = session.run_ground_stress(PipelineConfig(), planar_maps=2, magnitudes=(10.0, 20.0), trials=2, output_dir=tmp_path)
    assert [row.trials for row in rows] == [4, 4]
    assert (tmp_path / "stress.csv").is_file()


@pytest.mark.slow
def test_corridor_revisit_is_closed(corridor_run):
    result, output, elapsed = corridor_run
    assert elapsed < 60.0
    assert len(result.partition) >= 4
    indices = [i for part in result.partition for i in part]
    assert indices == list(range(len(indices)))
    assert result.closures
    assert all(r < q - 1 for q, r in detected_pairs(result))
    assert result.scan_closures

    metrics = result.metrics
    assert metrics["map"]["precision"] == 1.0
    assert metrics["map"]["recall"] >= 0.5
    assert metrics["scan"]["precision"] >= 0.9
    assert metrics["fitness"]["pairs"] == len(result.closures)
    assert metrics["fitness"]["mean"] >= 0.6

    for name in ("closures.csv", "scan_closures.csv", "session_state.json", "summary.json", "pr_curve.csv", "pr_curve_maps.csv"):
        assert (output / name).is_file()
    summary = json.loads((output / "summary.json").read_text())
    assert "curve" not in summary["map"]
    assert summary["schema_version"] == 1


@pytest.mark.slow
def test_reevaluation_matches_run(corridor, corridor_run):
    result, output, _ = corridor_run
    metrics = session.evaluate_outputs(corridor, PipelineConfig(), output)
    assert metrics["map"]["ap"] == pytest.approx(result.metrics["map"]["ap"])
    assert metrics["scan"]["ap"] == pytest.approx(result.metrics["scan"]["ap"])
    assert metrics["closures"] == len(result.closures)


@pytest.mark.slow
def test_ground_alignment_recovers_oscillating_session(corridor_run, tmp_path_factory):
    manifest = synthetic_session(tmp_path_factory, "corridor_oscillating")
    aligned = session.run_session(manifest, PipelineConfig())
    flat_config = PipelineConfig()
    flat_config.ground.enabled = False
    unaligned = session.run_session(manifest, flat_config)

    planar = len(corridor_run[0].closures)
    assert planar > 0
    assert aligned.metrics["map"]["precision"] == 1.0
    # 揺れのない走行と比べて失うクロージャは2割未満、補正なしでは半分超
    assert len(aligned.closures) >= 0.8 * planar
    assert len(unaligned.closures) < 0.5 * planar


@pytest.mark.slow
def test_cross_session_wedge_against_full_database(corridor, tmp_path_factory):
    db_path = tmp_path_factory.mktemp("db") / "corridor.hbst"
    reference = session.build_database(corridor, PipelineConfig(), db_path)
    loaded = storage.load(db_path)
    size = len(loaded)
    assert size == len(reference.database)
    assert sorted(loaded.maps) == list(range(len(reference.partition)))

    wedge = synthetic_session(tmp_path_factory, "corridor_wedge")
    result = session.run_session(wedge, PipelineConfig(), loaded_db=loaded, reference_manifest=corridor)

    assert len(loaded) == size
    assert len(result.database) == 0
    assert result.closures
    assert result.metrics["cross_session"] is True
    assert result.metrics["scan"] is None
    assert result.metrics["map"]["precision"] == 1.0


@pytest.mark.slow
def test_loaded_database_guards(corridor, tmp_path):
    db = DescriptorDatabase()
    with pytest.raises(ConfigError, match="cannot save"):
        session.run_session(corridor, PipelineConfig(), loaded_db=db, save_db=tmp_path / "x.hbst")

    db_path = tmp_path / "tiny.hbst"
    tiny = generate_synthetic_world(load_world_spec(tiny_world(tmp_path)), tmp_path / "tiny")
    session.build_database(tiny, small_config(tau_c=10.0), db_path)
    with pytest.raises(ConfigError, match="nu_b"):
        session.run_session(corridor, PipelineConfig(nu_b=1.0), loaded_db=storage.load(db_path))


def process_maps(manifest: SessionManifest, config: PipelineConfig):
    handler = MapHandler(config, DescriptorDatabase(), state=StateManager(manifest.session_id))
    maps = list(accumulate(manifest.scans(), config.tau_c, config.max_range, config.nu_map))
    return maps, [handler.process(local_map) for local_map in maps]


@pytest.mark.slow
def test_pruning_suppresses_repeated_structure(tmp_path_factory):
    manifest = synthetic_session(tmp_path_factory, "bridge")
    pruned_config = PipelineConfig()
    raw_config = PipelineConfig()
    raw_config.feature.prune = False

    maps, pruned = process_maps(manifest, pruned_config)
    _, raw = process_maps(manifest, raw_config)

    truth = reference_map_closures(session.build_partitioned_maps(
        session.ground_truth_scans(manifest, manifest.ground_truth()),
        [m.scan_indices for m in maps],
        pruned_config,
    ))
    false_closures = [
        (c.query_map, c.reference_map) for p in pruned for c in p.closures
        if (c.reference_map, c.query_map) not in truth
    ]
    assert false_closures == []

    def matches(processed):
        return sum(len(vote.pairs) for p in processed for vote in p.votes)

    assert matches(raw) > matches(pruned)


def test_cli_synth_and_run(tmp_path):
    assert main(["synth", "--world", str(tiny_world(tmp_path)), "--output", str(tmp_path / "session")]) == EXIT_OK
    manifest = tmp_path / "session" / "session.yaml"
    assert manifest.is_file()

    code = main([
        "run", "--manifest", str(manifest), "--output", str(tmp_path / "out"),
        "--set", "tau_c=10", "--set", "max_range=30", "--dump-bev", str(tmp_path / "bev"),
    ])
    assert code == EXIT_OK
    assert (tmp_path / "out" / "closures.csv").is_file()
    assert (tmp_path / "bev" / "map_0000.pgm").is_file()

    assert main(["dump-bev", "--manifest", str(manifest), "--output", str(tmp_path / "dump"), "--set", "tau_c=10"]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "dump").iterdir()) == sorted(p.name for p in (tmp_path / "bev").iterdir())


def test_cli_input_errors(tmp_path):
    (tmp_path / "scans").mkdir()
    write_poses(tmp_path / "poses.txt", [])
    base = ["run", "--scans", str(tmp_path / "scans"), "--poses", str(tmp_path / "poses.txt"), "--output", str(tmp_path / "out")]

    assert main(base) == EXIT_INPUT_ERROR
    assert main(base + ["--set", "tau_c=-1"]) == EXIT_INPUT_ERROR
    assert main(["run", "--output", str(tmp_path / "out")]) == EXIT_INPUT_ERROR
    assert main(["run", "--scans", str(tmp_path / "scans"), "--output", str(tmp_path / "out")]) == EXIT_INPUT_ERROR
    assert main(["build-db", "--manifest", str(tmp_path / "missing.yaml"), "--db", str(tmp_path / "x.hbst")]) == EXIT_INPUT_ERROR


def test_cli_stage_failure(tmp_path):
    # 全点が距離フィルタの外にあるのでローカルマップが空になる
    for index in range(3):
        write_scan(tmp_path / "scans" / f"{index:06d}.bin", np.full((5, 3), 500.0))
    write_poses(tmp_path / "poses.txt", straight_poses(3))
    code = main(["run", "--scans", str(tmp_path / "scans"), "--poses", str(tmp_path / "poses.txt"), "--output", str(tmp_path / "out")])
    assert code == EXIT_STAGE_FAILURE


def test_cli_ground_stress(tmp_path):
    code = main(["stress-ground", "--planar", "1", "--magnitudes", "10", "--trials", "2", "--output", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "stress.csv").read_text().splitlines()[0] == "magnitude_deg,mean_error_deg,max_error_deg,trials"
