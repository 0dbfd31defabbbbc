import json

import numpy as np
import pytest

from aread.cli import main
from aread.config import read_flat
from aread.data import load_csv, split
from aread.runner import DataSource, RunConfig, eval_run, evaluate, load_run, read_scores
from aread.synth import generate

TINY = """\
synth.num_domains = 4
synth.clusters = [0, 1, 0, 1]
synth.sizes = [400, 250, 80, 40]
synth.users = 40
synth.items = 60
emb.dim = 4
mmoe.num_experts = 2
mmoe.hidden = [8]
hei.hidden = [[8], [8], [4]]
hemp.z = 2
hemp.warmup_batches = 3
hemp.update_interval = 4
train.epochs = 2
train.batch_size = 64
minor_threshold = 0.1
"""


def pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    return np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def full_run(cfg_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "full"
    assert main(["train", "--config", str(cfg_file), "--ablation", "full", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_synth_writes_loadable_csv(tmp_path):
    out = tmp_path / "s.csv"
    scfg = tmp_path / "s.cfg"
    scfg.write_text("num_domains = 2\nclusters = [0, 1]\nsizes = [30, 10]\n")
    assert main(["synth", "--synth-config", str(scfg), "--out", str(out)]) == 0
    ds = load_csv(out)
    assert len(ds) == 40 and ds.schema.domains == ["d0", "d1"]


def test_run_directory_contents(full_run):
    names = {p.name for p in full_run.iterdir()}
    assert {"config.cfg", "checkpoint.bin", "masks", "report.json", "scores.csv", "manifest.json"} <= names
    assert len(list((full_run / "masks").glob("domain_*.mask"))) == 4
    manifest = json.loads((full_run / "manifest.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["build_id"]) == 16
    report = json.loads((full_run / "report.json").read_text())
    assert report["hemp_rounds"] and {"chosen", "score", "density", "active", "prune_iters"} <= set(
        report["hemp_rounds"][0]["domains"][0]
    )


def test_identical_runs_byte_identical(cfg_file, full_run, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg_file), "--ablation", "full", "--seed", "1", "--out", str(again)]) == 0
    assert (again / "report.json").read_bytes() == (full_run / "report.json").read_bytes()
    for p in (full_run / "masks").iterdir():
        assert (again / "masks" / p.name).read_bytes() == p.read_bytes()


def test_test_data_read_once_after_training(full_run):
    lineage = json.loads((full_run / "report.json").read_text())["lineage"]
    tests = [i for i, (split, _) in enumerate(lineage) if split == "test"]
    assert tests == [len(lineage) - 1]
    assert not any(split == "test" for split, _ in lineage[:-1])


def test_base_only_emits_no_masks(cfg_file, tmp_path):
    out = tmp_path / "base"
    assert main(["train", "--config", str(cfg_file), "--ablation", "base-only", "--out", str(out)]) == 0
    assert not (out / "masks").exists()
    assert json.loads((out / "report.json").read_text())["hemp_rounds"] == []


def test_eval_reproduces_report(full_run, tmp_path):
    rep = tmp_path / "eval.json"
    assert main(["eval", "--run", str(full_run), "--report", str(rep)]) == 0
    assert json.loads(rep.read_text()) == json.loads((full_run / "report.json").read_text())["test"]


def test_eval_all_ones_is_unmasked_ensemble(full_run):
    cfg, _, model, _, stats = load_run(full_run)
    test = DataSource(cfg).test()
    unmasked, _ = evaluate(model, test, None, stats)
    assert eval_run(full_run, all_ones=True) == unmasked


def test_per_domain_auc_matches_dumped_scores(full_run):
    domains, labels, scores = read_scores(full_run / "scores.csv")
    per = json.loads((full_run / "report.json").read_text())["test"]["per_domain"]
    for d, entry in per.items():
        sel = domains == int(d)
        assert entry["auc"] == pytest.approx(pairwise_auc(scores[sel], labels[sel]), abs=1e-12)
        assert entry["n"] == sel.sum()


def test_analyze_masks_csv(full_run, tmp_path):
    out = tmp_path / "or.csv"
    assert main(["analyze-masks", "--masks", str(full_run / "masks"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "domain,d0,d1,d2,d3"
    mat = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]])
    np.testing.assert_array_equal(mat, mat.T)
    np.testing.assert_array_equal(np.diag(mat), 1.0)


def test_csv_directory_source(full_run, tmp_path, cfg_file):
    cfg = RunConfig.from_flat(read_flat(cfg_file))
    tr, va, te = split(generate(cfg.synth), seed=0)
    for name, part in (("train", tr), ("valid", va), ("test", te)):
        part.to_csv(tmp_path / f"{name}.csv")
    out = tmp_path / "csvrun"
    assert main(["train", "--config", str(cfg_file), "--data", str(tmp_path), "--ablation", "+hei", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["test"]["domain_auc"] is not None


def test_hemp_flags_reach_config(cfg_file, tmp_path):
    out = tmp_path / "flags"
    args = ["train", "--config", str(cfg_file), "--hemp.z", "1", "--hemp.alpha", "0.2", "--hemp.update-interval", "1000"]
    assert main([*args, "--out", str(out)]) == 0
    cfg = RunConfig.from_flat(read_flat(out / "config.cfg"))
    assert cfg.hemp.z == 1 and cfg.hemp.alpha == 0.2 and cfg.hemp.update_interval == 1000


def test_unknown_config_key_fails(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("hemp.zz = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "hemp.zz" in capsys.readouterr().err


def test_mask_mismatch_fails(full_run, tmp_path, capsys):
    (tmp_path / "domain_0.mask").write_text("domain 0 2x2\n1111\n")
    assert main(["eval", "--run", str(full_run), "--masks", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_invalid_ablation_rejected():
    with pytest.raises(SystemExit):
        main(["train", "--ablation", "everything"])


def test_flat_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_flat(cfg.to_flat()) == cfg
