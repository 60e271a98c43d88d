import json
import shutil

import pytest

from honeymark.cli import main
from honeymark.config import DESK_DEFAULTS, ExperimentConfig
from honeymark.errors import ConfigError
from honeymark.pipeline import STAGE_DIRS, Pipeline, output_lock


def _write_config(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def test_missing_dataset_path_names_field(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"dataset": {"idx": {"images": "no.idx", "labels": "no-labels.idx"}}})
    assert main(["run", "--config", str(cfg)]) == 2
    assert "dataset.idx.images" in capsys.readouterr().err


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"honey": {"iterations": -1}})
    assert exc.value.field == "honey"


def test_arch_override_does_not_inherit_widths():
    cfg = ExperimentConfig.from_dict({"suspicious": {"arch": {"kind": "small_cnn"}}})
    assert cfg.arch("suspicious", (1, 16, 16), 10).hidden_sizes == (16, 32)


def test_stage_without_upstream_is_dependency_error(tmp_path, capsys):
    cfg = _write_config(tmp_path, {})
    out = tmp_path / "out"
    assert main(["split", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["generate-honey", "--config", str(cfg), "--out", str(out)]) == 3
    err = capsys.readouterr().err
    assert "selection.json" in err
    assert json.loads((out / "error.json").read_text())["stage"] == "generate-honey"


def test_default_config_round_trips(tmp_path):
    path = tmp_path / "d.json"
    assert main(["default-config", "--out", str(path)]) == 0
    assert json.loads(path.read_text()) == json.loads(json.dumps(DESK_DEFAULTS))


def test_lock_blocks_second_writer(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(Exception, match="locked"):
            with output_lock(tmp_path):
                pass
    assert not (tmp_path / ".honeymark.lock").exists()


@pytest.mark.slow
def test_rerun_is_noop(desk_run):
    run_cfg = desk_run.cfg
    pipe = Pipeline(run_cfg)
    before = {p: p.stat().st_mtime_ns for p in run_cfg.output_dir.rglob("*") if p.is_file()}
    pipe.run_all()
    after = {p: p.stat().st_mtime_ns for p in run_cfg.output_dir.rglob("*") if p.is_file()}
    assert before == after


@pytest.mark.slow
def test_every_stage_records_hash_and_seed(desk_run):
    run_cfg = desk_run.cfg
    for d in STAGE_DIRS.values():
        prov = json.loads((run_cfg.output_dir / d / "PROVENANCE.json").read_text())
        assert prov["config_hash"] == run_cfg.config_hash and prov["seed"] == run_cfg.seed
        assert prov["files"]


@pytest.mark.slow
def test_report_from_replay_matches(desk_run, tmp_path):
    run_cfg = desk_run.cfg
    copy = tmp_path / "replay"
    shutil.copytree(run_cfg.output_dir, copy)
    cfg = _write_config(tmp_path, {})
    # drop every checkpoint of a suspicious model so nothing can be queried live
    for ckpt in (copy / "pairs").glob("pair*/*.ckpt"):
        ckpt.unlink()
    assert main(["verify", "--config", str(cfg), "--out", str(copy), "--replay"]) == 0
    assert main(["report", "--config", str(cfg), "--out", str(copy), "--force"]) == 0
    for f in sorted((run_cfg.output_dir / "report").glob("metrics_*.json")):
        a, b = json.loads(f.read_text()), json.loads((copy / "report" / f.name).read_text())
        assert a == b


@pytest.mark.slow
def test_verify_compliant_checkpoint_mostly_negative(desk_run, tmp_path, capsys):
    run_cfg = desk_run.cfg
    cfg = _write_config(tmp_path, {})
    ckpt = run_cfg.output_dir / "pairs" / "pair0" / "compliant.ckpt"
    assert main(["verify", "--config", str(cfg), "--out", str(run_cfg.output_dir), "--suspicious", str(ckpt)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["positive_rate"] < 0.5 and summary["query_count"] == 30
