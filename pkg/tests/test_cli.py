import json

import pytest

from satgraph.cli import main
from satgraph.datasets import load_jsonl
from satgraph.train import load_checkpoint

FAST = ["num_layers=1", "hidden_dim=8", "num_heads=2", "pe_dim=3", "epochs=2", "batch_size=8", "warmup_steps=2"]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "d.jsonl"
    assert main(["gen", "triangle-count", "--n", "20", "--nodes", "6", "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture
def trained(tmp_path, corpus):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(corpus), "--out", str(ckpt), "--set", *FAST, "pe=rwpe"]) == 0
    return corpus, ckpt


class TestGen:
    def test_reproducible(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert main(["gen", "cycle-vs-triangles", "--n", "200", "--seed", "7", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(load_jsonl(a)) == 200

    def test_sbm(self, tmp_path):
        out = tmp_path / "s.jsonl.gz"
        assert main(["gen", "sbm", "--n", "3", "--blocks", "3", "4", "--out", str(out)]) == 0
        assert load_jsonl(out).task == "node-class"

    def test_bad_kind_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen", "nope", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2


class TestTrainEval:
    def test_history_and_checkpoint(self, trained):
        _, ckpt = trained
        hist = json.loads(ckpt.with_name("m.ckpt.history.json").read_text())
        assert hist["config"]["model"]["num_layers"] == 1
        assert hist["config"]["train"]["epochs"] == 2
        assert len(hist["history"]["train_loss"]) == 2
        _, cfg = load_checkpoint(ckpt)
        assert cfg.pe == "rwpe" and cfg.in_dim == 1

    def test_eval(self, trained, capsys):
        corpus, ckpt = trained
        capsys.readouterr()
        assert main(["eval", "--data", str(corpus), "--checkpoint", str(ckpt), "--split", "test"]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert metrics["split"] == "test" and metrics["count"] == 2 and metrics["mae"] >= 0

    def test_dump_attention(self, tmp_path, corpus):
        ckpt = tmp_path / "c.ckpt"
        assert main(["train", "--data", str(corpus), "--out", str(ckpt), "--set", *FAST, "readout=cls"]) == 0
        out = tmp_path / "att.json"
        assert main(["dump-attention", "--data", str(corpus), "--checkpoint", str(ckpt),
                     "--graph-index", "3", "--out", str(out)]) == 0
        trace = json.loads(out.read_text())
        assert trace["graph_index"] == 3 and trace["readout"] == "cls"
        assert trace["records"][0]["nodes"][-1] == "cls"
        assert trace["cls_index"] == len(trace["records"][0]["cls_row"]) - 1
        assert len(trace["records"]) == 2

    def test_graph_index_out_of_range(self, trained):
        corpus, ckpt = trained
        assert main(["dump-attention", "--data", str(corpus), "--checkpoint", str(ckpt), "--graph-index", "99"]) == 2

    def test_config_file_with_overrides(self, tmp_path, corpus):
        conf = tmp_path / "zinc.json"
        conf.write_text(json.dumps({"model": {"hidden_dim": 8, "num_heads": 2, "num_layers": 1, "pe": "none"},
                                    "train": {"epochs": 1, "batch_size": 8}}))
        ckpt = tmp_path / "k3.ckpt"
        assert main(["train", "--data", str(corpus), "--config", str(conf), "--out", str(ckpt),
                     "--set", "k=3", "extractor=subgraph"]) == 0
        _, cfg = load_checkpoint(ckpt)
        assert (cfg.k, cfg.extractor, cfg.hidden_dim) == (3, "subgraph", 8)

    @pytest.mark.parametrize("override", ["bogus=1", "k=three", "k", "model.nope=1", "seed=1.5"])
    def test_bad_override_exits_2(self, tmp_path, corpus, override):
        assert main(["train", "--data", str(corpus), "--out", str(tmp_path / "x"), "--set", override]) == 2

    def test_invalid_config_exits_1(self, tmp_path, corpus):
        assert main(["train", "--data", str(corpus), "--out", str(tmp_path / "x"), "--set", "hidden_dim=10",
                     "num_heads=4"]) == 1

    def test_missing_file_exits_1(self, tmp_path):
        assert main(["eval", "--data", str(tmp_path / "none.jsonl"), "--checkpoint", str(tmp_path / "c")]) == 1

    def test_corrupt_checkpoint_exits_1(self, tmp_path, corpus):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage!")
        assert main(["eval", "--data", str(corpus), "--checkpoint", str(bad)]) == 1


class TestVerify:
    def test_suite_passes(self, capsys):
        assert main(["verify", "--suite", "theorem2", "--seed", "1"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"] is True

    def test_deterministic_output(self, capsys):
        main(["verify", "--suite", "smoother", "--seed", "2", "--trials", "10"])
        first = capsys.readouterr().out
        main(["verify", "--suite", "smoother", "--seed", "2", "--trials", "10"])
        assert capsys.readouterr().out == first

    def test_bad_suite_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--suite", "theorem3"])
        assert exc.value.code == 2
