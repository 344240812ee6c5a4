import csv
import json
import shutil

import numpy as np
import pytest

from reportseg.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME, export_rows, main, write_predictions
from reportseg.config import ConfigError, RunConfig, load_config
from reportseg.phantom import load_corpus, load_manifest
from reportseg.report import Attenuation, StructuredReport, TumorFinding, serialize_report
from reportseg.volgrid import VolumeGrid, write_volume

QUICK = ["--set", "train.epochs=1", "--set", "train.batches_per_epoch=2", "--set", "train.batch_size=2"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen", "--out", str(out), "--cases", "6", "--test", "3", "--seed", "7"]) == 0
    return out


def test_gen_twice_identical(corpus, tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--cases", "6", "--test", "3", "--seed", "7"]) == 0
    assert tree(tmp_path) == tree(corpus)


def test_gen_manifest_sidecar(corpus):
    side = json.loads((corpus / "run_gen.json").read_text())
    assert side["seed"] == 7 and len(side["config_hash"]) == 64
    assert "manifest.json" in side["artifacts"]
    assert "time" not in json.dumps(side)


def perfect(case, classes):
    prob = np.zeros((len(classes),) + case.organs.shape, np.float32)
    for i, organ in enumerate(classes):
        if case.gt and organ in case.gt:
            prob[i][case.gt[organ]] = 0.99
    return prob


def write_perfect(corpus, out, split="test"):
    cases = load_corpus(corpus / "manifest.json", split=split)
    names = cases[0].organs.names
    classes = [names[k] for k in sorted(names)]
    for c in cases:
        write_predictions(out, c.scan_id, classes, perfect(c, classes), c.organs.spacing)
    return cases, classes


def test_eval_perfect_predictions(corpus, tmp_path):
    cases, _ = write_perfect(corpus, tmp_path / "pred")
    out = tmp_path / "metrics.csv"
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--predictions", str(tmp_path / "pred"),
                 "--out", str(out)]) == 0
    rows = {r["organ"]: r for r in read_csv(out)}
    if any(c.report.findings for c in cases):
        assert float(rows["macro"]["f1"]) == 1.0
    assert float(rows["macro"]["spec"]) == 1.0
    side = json.loads((tmp_path / "run_eval.json").read_text())
    assert side["voxel_count"] == 6 and side["confidence"] == 0.5


def test_eval_raw_count_keeps_threshold(corpus, tmp_path):
    write_perfect(corpus, tmp_path / "pred")
    out = tmp_path / "m.csv"
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--predictions", str(tmp_path / "pred"),
                 "--out", str(out), "--raw-count", "--thresholds", "30,0.7"]) == 0
    side = json.loads((tmp_path / "run_eval.json").read_text())
    assert (side["voxel_count"], side["confidence"]) == (30, 0.7)


def test_rank_puts_contradicted_case_first(corpus, tmp_path):
    cases, classes = write_perfect(corpus, tmp_path / "pred", split="train")
    healthy = next(c for c in cases if not c.report.findings)
    # the prediction stays empty, the report now claims a tumor
    bad = StructuredReport((TumorFinding(classes[0], (14.0,), attenuation=Attenuation.HYPO),),
                           tuple(o for o in classes[1:]))
    copy = tmp_path / "corpus"
    shutil.copytree(corpus, copy)
    data, _ = load_manifest(copy)
    entry = next(e for e in data["cases"] if e["id"] == healthy.scan_id)
    (copy / entry["report"]).write_text(serialize_report(bad))
    out = tmp_path / "rank.csv"
    assert main(["rank", "--manifest", str(copy / "manifest.json"), "--predictions", str(tmp_path / "pred"),
                 "--split", "train", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0]["scan_id"] == healthy.scan_id
    assert [int(r["rank"]) for r in rows] == list(range(1, len(rows) + 1))


def test_train_then_eval_checkpoint(corpus, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(corpus / "manifest.json"), "--out", str(run), *QUICK]) == 0
    assert (run / "checkpoint.npz").exists()
    rows = read_csv(run / "train_metrics.csv")
    assert {r["step"] for r in rows} == {"1", "2"}
    out = tmp_path / "metrics.csv"
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--checkpoint", str(run / "checkpoint.npz"),
                 "--out", str(out), "--threads", "1"]) == 0
    assert read_csv(out)[-1]["organ"] == "macro"
    cols, series = export_rows(rows, window=2)
    assert cols[0] == "step" and len(series) == 2


def test_export_moving_average():
    rows = [{"step": "1", "scan_id": "a", "L_vol": "1.0"}, {"step": "1", "scan_id": "b", "L_vol": "3.0"},
            {"step": "2", "scan_id": "a", "L_vol": "4.0"}, {"step": "3", "scan_id": "a", "L_vol": ""}]
    cols, out = export_rows(rows, window=2)
    assert cols == ["step", "L_vol"]
    assert [r["L_vol"] for r in out] == ["2", "3", "4"]
    with pytest.raises(ConfigError):
        export_rows(rows, window=0)


def test_config_hash_ignores_key_order(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text('{"seed": 3, "eval": {"nsd_tol_mm": 1.0, "split": "test"}}')
    b.write_text('{"eval": {"split": "test", "nsd_tol_mm": 1.0}, "seed": 3}')
    assert load_config(a).hash() == load_config(b).hash()
    assert load_config(a).hash() != RunConfig().hash()
    assert load_config(None, ["eval.nsd_tol_mm=1.0", "seed=3"]).hash() == load_config(a).hash()


def test_unknown_keys_rejected(tmp_path):
    for d in ({"bogus": 1}, {"train": {"lr_typo": 1}}, {"data": {"x": 1}}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(d)
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"lr_typo": 1}}')
    assert main(["gen", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_CONFIG


def test_error_exit_codes(corpus, tmp_path, capsys):
    assert main(["eval", "--manifest", str(tmp_path / "none.json"), "--predictions", str(tmp_path),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_MISSING
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"
    # predictions directory without the volumes
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--predictions", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_MISSING
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--out", str(tmp_path / "o"), "--config", str(bad)]) == EXIT_CONFIG
    assert main(["gen", "--out", str(tmp_path / "o"), "--set", "phantom.diameter_range_mm=[2,10]"]) == EXIT_CONFIG
    assert main(["train", "--manifest", str(corpus / "manifest.json"), "--out", str(tmp_path / "t"),
                 "--set", "data.n_mask_cases=99"]) == EXIT_CONFIG


def test_localize_writes_pseudo_mask(corpus, tmp_path):
    cases = load_corpus(corpus / "manifest.json")
    case = next(c for c in cases if c.report.findings)
    organ = case.report.findings[0].organ
    data, root = load_manifest(corpus / "manifest.json")
    entry = next(e for e in data["cases"] if e["id"] == case.scan_id)
    prob = np.where(case.gt[organ], 0.9, 0.05).astype(np.float32)
    write_volume(tmp_path / "p.vol", VolumeGrid(prob, case.organs.spacing))
    out = tmp_path / "loc"
    assert main(["localize", "--prob", str(tmp_path / "p.vol"), "--organs", str(root / entry["organs"]),
                 "--report", str(root / entry["report"]), "--organ", organ, "--out", str(out)]) == 0
    info = json.loads((out / "localization.json").read_text())
    assert info["organ"] == organ and len(info["tumors"]) >= 1
    other = next(o for o in case.report.negative_organs) if case.report.negative_organs else None
    if other:
        assert main(["localize", "--prob", str(tmp_path / "p.vol"), "--organs", str(root / entry["organs"]),
                     "--report", str(root / entry["report"]), "--organ", other,
                     "--out", str(out)]) == EXIT_RUNTIME
