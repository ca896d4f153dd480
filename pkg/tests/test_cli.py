import json
import subprocess
import sys

import pytest

from hcn.cli import main
from hcn.data import load_samples


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    main(["data", "synth", "--out", str(d / "log.tsv"), "--users", "40", "--items", "40",
          "--seq-len", "20", "--clusters", str(d / "clusters.tsv")])
    (d / "cfg.json").write_text(json.dumps({
        "n": 2, "h": 2, "r": 2, "D": 8, "l_long": 8, "l_short": 3,
        "data": {"max_train_per_user": 3}, "train": {"epochs": 2}}))
    return d


def test_prepare_writes_samples_and_sidecar(workdir, capsys):
    main(["data", "prepare", "--input", str(workdir / "log.tsv"), "--ll", "8", "--ls", "3",
          "--neg-ratio", "4", "--seed", "0", "--out", str(workdir / "prep")])
    split, meta = load_samples(workdir / "prep" / "samples.hcns")
    assert meta["skipped_users"] == 0 and meta["n_items"] == 42
    assert len(meta["config_hash"]) == 64
    assert meta["counts"]["test"] == len(split.test) == 40 * 5
    assert "train\t" in capsys.readouterr().out


def test_train_eval_export_score(workdir, capsys):
    ck = workdir / "ck"
    main(["train", "--config", str(workdir / "cfg.json"), "--data", str(workdir / "log.tsv"),
          "--out", str(ck)])
    assert {p.name for p in ck.iterdir()} == {"config.json", "vocab.json", "params.hcnp", "run.json"}
    capsys.readouterr()

    main(["eval", "--checkpoint", str(ck), "--data", str(workdir / "log.tsv"),
          "--metrics", "auc,hr@10,ndcg@10,pearson", "--json", str(workdir / "m.json")])
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "metric\tvalue"
    assert [l.split("\t")[0] for l in lines[1:]] == ["auc", "hr@10", "ndcg@10", "pearson"]
    assert json.loads((workdir / "m.json").read_text())["hit_rate"]["10"] >= 0

    main(["export-items", "--checkpoint", str(ck), "--out", str(workdir / "items.hcni")])
    (workdir / "hist.txt").write_text("i01\ni02\ni03\ni11\n")
    (workdir / "cands.txt").write_text("i05\ni06\nunknown\ni30\n")
    capsys.readouterr()
    main(["score", "--checkpoint", str(ck), "--index", str(workdir / "items.hcni"),
          "--user-history", str(workdir / "hist.txt"), "--candidates", str(workdir / "cands.txt"),
          "--k", "2"])
    out = capsys.readouterr()
    rows = [l.split("\t") for l in out.out.strip().splitlines()]
    assert len(rows) == 2 and [r[2] for r in rows] == ["1", "2"]
    assert float(rows[0][1]) >= float(rows[1][1])
    assert "unknown" in out.err

    main(["case-study", "--checkpoint", str(ck), "--index", str(workdir / "items.hcni"),
          "--user-history", str(workdir / "hist.txt"), "--clusters", str(workdir / "clusters.tsv")])
    text = capsys.readouterr().out
    assert text.count("center ") == 2 and "cluster=" in text


def test_train_from_prepared_directory(workdir, capsys):
    main(["data", "prepare", "--input", str(workdir / "log.tsv"), "--ll", "8", "--ls", "3",
          "--out", str(workdir / "prep2"), "--max-train-per-user", "2"])
    main(["train", "--config", str(workdir / "cfg.json"), "--data", str(workdir / "prep2"),
          "--out", str(workdir / "ck2")])
    main(["eval", "--checkpoint", str(workdir / "ck2"), "--data", str(workdir / "prep2"),
          "--metrics", "auc"])
    assert "auc\t" in capsys.readouterr().out


def test_bench(capsys):
    main(["bench", "--candidates", "500", "--D", "16", "--n", "4", "--r", "2",
          "--l-long", "20", "--l-short", "5"])
    out = dict(l.split("\t") for l in capsys.readouterr().out.strip().splitlines())
    assert out["candidates"] == "500" and float(out["candidates_per_second"]) > 0


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "hcn.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("train", "eval", "ablate", "export-items", "score", "case-study", "bench", "data"):
        assert cmd in res.stdout
