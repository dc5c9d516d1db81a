import csv
import json

import pytest

from boxprompt.backbone import EmbeddingCache
from boxprompt.cli import main
from boxprompt.datapipe import read_manifest


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    last = out.strip().splitlines()[-1] if out.strip() else "{}"
    return code, json.loads(last), err


@pytest.fixture
def data(tmp_path, capsys):
    d = tmp_path / "data"
    code, _, _ = run(capsys, "preprocess", "--synthetic", "--n", 12, "--seed", 7, "--image-size", 64,
                     "--splits", "0.5,0.25,0.25", "--out", d)
    assert code == 0
    return d / "manifest.jsonl"


def test_preprocess_cardinality_and_idempotence(tmp_path, capsys):
    d = tmp_path / "d"
    code, first, _ = run(capsys, "preprocess", "--synthetic", "--n", 40, "--seed", 7, "--image-size", 64, "--out", d)
    assert code == 0 and first["entries"] == 40 and first["rewritten"]
    assert len(read_manifest(d / "manifest.jsonl")) == 40
    stamp = (d / "manifest.jsonl").stat().st_mtime_ns
    code, again, _ = run(capsys, "preprocess", "--synthetic", "--n", 40, "--seed", 7, "--image-size", 64, "--out", d)
    assert code == 0 and not again["rewritten"] and again["fingerprint"] == first["fingerprint"]
    assert (d / "manifest.jsonl").stat().st_mtime_ns == stamp


def test_preprocess_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["preprocess", "--synthetic"])
    assert ei.value.code == 2


def test_preprocess_bad_splits(tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["preprocess", "--synthetic", "--splits", "0.5,0.6,0", "--out", str(tmp_path)])
    assert ei.value.code == 2


def test_precompute_counts_hits_and_tamper(data, tmp_path, capsys):
    cache = tmp_path / "cache"
    code, info, _ = run(capsys, "precompute", "--manifest", data, "--cache", cache)
    assert code == 0 and info["count"] == info["computed"] == 12 and info["bytes"] > 0
    code, info, _ = run(capsys, "precompute", "--manifest", data, "--cache", cache)
    assert code == 0 and info["computed"] == 0 and info["hits"] == 12
    rec = EmbeddingCache(cache).manifest["records"]["syn0004"]["file"]
    raw = bytearray((cache / rec).read_bytes())
    raw[-1] ^= 0x55
    (cache / rec).write_bytes(bytes(raw))
    code, _, err = run(capsys, "precompute", "--manifest", data, "--cache", cache)
    assert code == 1 and "syn0004" in err


def test_precompute_cache_env(data, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BOXPROMPT_CACHE", str(tmp_path / "envcache"))
    code, info, _ = run(capsys, "precompute", "--manifest", data)
    assert code == 0 and info["cache"] == str(tmp_path / "envcache")


def test_precompute_unknown_backbone(data, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["precompute", "--manifest", str(data), "--backbone", "vit-h"])
    assert ei.value.code == 2


def test_print_config_paper_preset(capsys):
    code, cfg, _ = run(capsys, "train", "--preset", "paper-20shot", "--print-config")
    t = cfg["train"]
    assert code == 0
    assert [t["lambda1"], t["lambda2"], t["lambda3"], t["lambda4"]] == [1.0, 0.01, 0.001, 0.001]
    assert (t["eps1"], t["eps2"], t["epochs"], t["batch_size"]) == (0.7, 0.9, 200, 4)
    assert (t["lr"], t["weight_decay"]) == (1e-4, 1e-4)


def test_print_config_ablation(capsys):
    _, cfg, _ = run(capsys, "train", "--ablate", "pseudo-only", "--print-config")
    t = cfg["train"]
    assert [t["lambda1"], t["lambda2"], t["lambda3"], t["lambda4"]] == [1.0, 0.0, 0.0, 0.0]


def test_unknown_preset_exits_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train", "--preset", "sam-huge", "--print-config"])
    assert ei.value.code == 2
    assert "paper-20shot" in capsys.readouterr().err


def test_yaml_config_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("lambda4: 0.0\nepochs: 7\n")
    _, out, _ = run(capsys, "train", "--config", cfg, "--print-config")
    assert out["train"]["lambda4"] == 0.0 and out["train"]["epochs"] == 7
    cfg.write_text("lamda4: 0.0\n")
    with pytest.raises(SystemExit) as ei:
        main(["train", "--config", str(cfg), "--print-config"])
    assert ei.value.code == 2
    cfg.write_text("eps1: 0.95\n")
    with pytest.raises(SystemExit) as ei:
        main(["train", "--config", str(cfg), "--print-config"])
    assert ei.value.code == 2


def test_train_eval_report(data, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, res, _ = run(capsys, "train", "--manifest", data, "--epochs", 2, "--out", run_dir)
    assert code == 0
    for name in ("generator.ckpt", "log.jsonl", "gate.json", "config.json"):
        assert (run_dir / name).exists()
    gate = json.loads((run_dir / "gate.json").read_text())
    assert gate["split"] == "val" and set(gate) >= {"box_dice", "fg_box_ratio", "pass"}

    code, ev, _ = run(capsys, "eval", "--checkpoint", run_dir / "generator.ckpt", "--manifest", data,
                      "--metric", "dsc", "--out", tmp_path / "ev.csv", "--overlays", tmp_path / "ov")
    assert code == 0 and "assd" not in ev
    with open(tmp_path / "ev.csv") as f:
        assert next(csv.reader(f)) == ["sample_id", "dsc"]
    assert len(list((tmp_path / "ov").glob("*.png"))) == 3

    code, _, _ = run(capsys, "eval", "--checkpoint", run_dir / "generator.ckpt", "--manifest", data,
                     "--split", "val", "--out", tmp_path / "ev_val.csv")
    assert code == 0
    code, rep, err = run(capsys, "report", tmp_path / "ev.csv", tmp_path / "ev_val.csv", run_dir / "log.jsonl",
                         "--out", tmp_path / "rep")
    assert code == 0
    assert "symmetric difference" in err
    rows = list(csv.reader(open(tmp_path / "rep" / "comparison.csv")))
    assert rows[0] == ["run", "n", "assd", "dsc"]
    assert "±" in rows[1][-1]
    assert (tmp_path / "rep" / "loss_curves_run.png").exists()


def test_eval_untrained_checkpoint(data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--manifest", data, "--epochs", 0, "--out", tmp_path / "r0")
    assert code == 0
    code, ev, _ = run(capsys, "eval", "--checkpoint", tmp_path / "r0" / "generator.ckpt", "--manifest", data,
                      "--out", tmp_path / "e.csv")
    assert code == 0 and 0 <= ev["dsc"][0] <= 100


def test_report_log_only(data, tmp_path, capsys):
    run(capsys, "train", "--manifest", data, "--epochs", 1, "--out", tmp_path / "r1")
    code, rep, _ = run(capsys, "report", tmp_path / "r1" / "log.jsonl", "--out", tmp_path / "rep")
    assert code == 0 and rep["written"] == [str(tmp_path / "rep" / "loss_curves_r1.png")]


def test_report_missing_input(tmp_path, capsys):
    code, _, err = run(capsys, "report", tmp_path / "nope.csv", "--out", tmp_path)
    assert code == 1 and "does not exist" in err


def test_require_cache_guidance(data, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--manifest", data, "--epochs", 1, "--out", tmp_path / "r",
                       "--cache", tmp_path / "empty", "--require-cache")
    assert code == 1 and "precompute" in err


def test_ablate_noise(data, tmp_path, capsys):
    code, res, _ = run(capsys, "ablate-noise", "--manifest", data, "--bands", "0,3-5", "--seeds", 1,
                       "--epochs", 1, "--out", tmp_path / "nz")
    assert code == 0 and set(res["dsc"]) == {"0", "3-5"}
    rows = list(csv.DictReader(open(tmp_path / "nz" / "noise_table.csv")))
    assert [r["band"] for r in rows] == ["0", "3-5"]
    code, rep, _ = run(capsys, "report", tmp_path / "nz" / "noise_table.csv", "--out", tmp_path / "rep")
    assert code == 0 and rep["written"][0].endswith("dsc_vs_noise_noise_table.png")


def test_ablate_noise_zero_band_matches_clean_training(data, tmp_path, capsys):
    run(capsys, "ablate-noise", "--manifest", data, "--bands", "0", "--seeds", 1, "--epochs", 2,
        "--out", tmp_path / "nz")
    run(capsys, "train", "--manifest", data, "--epochs", 2, "--out", tmp_path / "clean")
    run(capsys, "eval", "--checkpoint", tmp_path / "clean" / "generator.ckpt", "--manifest", data,
        "--metric", "dsc", "--out", tmp_path / "clean.csv")
    band0 = list(csv.DictReader(open(tmp_path / "nz" / "noise_trials.csv")))[0]
    clean = list(csv.DictReader(open(tmp_path / "clean.csv")))
    mean = [r for r in clean if r["sample_id"] == "mean"][0]
    assert float(band0["dsc"]) == pytest.approx(float(mean["dsc"]), abs=1e-6)


def test_ablate_noise_malformed_band(data, tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["ablate-noise", "--manifest", str(data), "--bands", "0,5-3", "--out", str(tmp_path)])
    assert ei.value.code == 2


def test_trials_nine(data, tmp_path, capsys):
    code, res, _ = run(capsys, "train", "--manifest", data, "--epochs", 1, "--trials", 9, "--subset-size", 4,
                       "--out", tmp_path / "t")
    assert code == 0 and res["trials"] == 9
    rows = list(csv.DictReader(open(tmp_path / "t" / "trials.csv")))
    assert len(rows) == 9


@pytest.mark.slow
def test_converged_desk_run_beats_pseudo_only_on_train(tmp_path, capsys):
    d = tmp_path / "desk"
    run(capsys, "preprocess", "--synthetic", "--n", 20, "--seed", 123, "--splits", "1,0,0", "--out", d)
    manifest = d / "manifest.jsonl"
    scores = {}
    for ablation in ("full", "pseudo-only"):
        out = tmp_path / ablation
        code, _, _ = run(capsys, "train", "--manifest", manifest, "--preset", "desk-synthetic", "--ablate", ablation,
                         "--eval-split", "train", "--out", out)
        assert code == 0
        code, ev, _ = run(capsys, "eval", "--checkpoint", out / "generator.ckpt", "--manifest", manifest,
                          "--split", "train", "--metric", "dsc", "--out", out / "train.csv")
        assert code == 0
        scores[ablation] = ev["dsc"][0]
    assert scores["full"] > scores["pseudo-only"], scores
