import json

import pytest
import yaml

from longseq.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN, EXIT_VERDICT, main, parse_bytes

SMALL = {
    "model": {"vocab_size": 64, "hidden_size": 16, "n_layers": 2, "q_heads": 4, "kv_heads": 2,
              "max_position": 32},
    "parallel": {"sp_degree": 2, "world_size": 2},
    "features": {"ulysses": True, "tiled_loss": True, "ckpt": True},
    "train": {"steps": 3},
    "data": {"seqlen": 32},
}


def _write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def _with(**sections):
    doc = json.loads(json.dumps(SMALL))
    for sec, upd in sections.items():
        doc[sec].update(upd)
    return doc


def test_parse_bytes():
    assert parse_bytes("64MiB") == 64 << 20
    assert parse_bytes("1.5k") == 1536
    assert parse_bytes("1000") == 1000
    with pytest.raises(Exception):
        parse_bytes("lots")


def test_train_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = (tmp_path / d / "loss.csv" for d in "ab")
    rows = lambda p: [r.split(",")[:3] for r in p.read_text().splitlines()]  # noqa: E731
    assert rows(a) == rows(b)
    for name in ("ledger_rank0.json", "ledger_rank1.csv", "comm_stats.json", "config.yaml", "report.json"):
        assert (tmp_path / "a" / name).exists()
    out = json.loads(capsys.readouterr().out.splitlines()[0])
    assert out["seed"] == 0 and out["final_loss"] > 0


def test_seed_override_changes_losses(tmp_path):
    cfg = _write(tmp_path, SMALL)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "loss.csv").read_text() != (tmp_path / "b" / "loss.csv").read_text()


def test_compare_against_matched_baseline_passes(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")
    assert json.loads((tmp_path / "cmp" / "verdict.json").read_text())["passed"]


def test_naive_label_sharding_compare_fails_with_exit_3(tmp_path, capsys):
    cfg = _write(tmp_path, _with(features={"naive_label_sharding": True}))
    assert main(["compare", "--config", cfg]) == EXIT_VERDICT
    assert capsys.readouterr().out.startswith("FAIL")


def test_compare_two_configs(tmp_path):
    a = _write(tmp_path, SMALL, "a.yaml")
    b = _write(tmp_path, _with(parallel={"sp_degree": 1, "world_size": 1}, features={"ulysses": False}), "b.yaml")
    assert main(["compare", "--config", a, "--other", b]) == EXIT_OK


def test_indivisible_heads_exit_2_with_hint(tmp_path, capsys):
    cfg = _write(tmp_path, _with(model={"q_heads": 9, "kv_heads": 9, "hidden_size": 72},
                                 parallel={"sp_degree": 8, "world_size": 8}))
    assert main(["train", "--config", cfg]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "parallel.sp_degree" in err and "you'd need SP to be 1, 3 or 9" in err


@pytest.mark.parametrize("text", ["model: [1, 2]\n", "model: {hidden_size: -1}\n", "model: {\n"])
def test_validate_config_rejects_bad_files(tmp_path, text):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    assert main(["validate-config", "--config", str(p)]) == EXIT_CONFIG


def test_validate_config_and_schema(tmp_path, capsys):
    assert main(["validate-config", "--config", _write(tmp_path, SMALL)]) == EXIT_OK
    assert main(["validate-config", "--schema"]) == EXIT_OK
    assert "features" in capsys.readouterr().out
    assert main(["validate-config"]) == EXIT_CONFIG
    assert main(["validate-config", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_host_oom_is_a_run_error(tmp_path, capsys):
    cfg = _write(tmp_path, _with(features={"ckpt_offload": True}))
    assert main(["train", "--config", cfg, "--host-budget", "1KiB"]) == EXIT_RUN
    assert "host-OOM" in capsys.readouterr().err


def test_estimate_anchors_and_presets(tmp_path, capsys):
    assert main(["estimate", "--anchors", "--format", "json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["fixed_8b_gb"]["computed"] == 144.0
    out = tmp_path / "est.json"
    assert main(["estimate", "--preset", "llama-8b", "--seqlen", "16000", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["inputs"]["seqlen"] == 16000
    assert main(["estimate", "--hidden", "64"]) == EXIT_CONFIG


def test_ablate_small_grid(tmp_path, capsys, monkeypatch):
    from longseq import train

    monkeypatch.setattr(train, "ABLATION_ROWS", train.ABLATION_ROWS[:2])
    assert main(["ablate", "--device-budget", "32MiB", "--resolution", "0.1", "--out", str(tmp_path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "baseline" in text and "+tiled loss" in text
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert rows[0]["max_seqlen"] < rows[1]["max_seqlen"]
    assert (tmp_path / "ablation.csv").exists()
