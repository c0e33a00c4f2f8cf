import json

import pytest

from hardmt.cli import main


def run(capsys, *argv):
    assert main([str(a) for a in argv]) == 0
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "task.json").write_text(json.dumps({"n_train_st": 20, "n_valid": 3, "n_test": 3}))
    assert main(["data", "--config", str(d / "task.json"), "--out", str(d / "data")]) == 0
    return d


def test_data_layout(data_dir):
    names = {p.name for p in (data_dir / "data").iterdir()}
    assert {"train.tsv", "train_st.jsonl", "train_mt.jsonl", "test.jsonl", "tgt.vocab", "cross.vocab",
            "spe.unigram", "src.unigram", "kmeans.dsqk", "features"} <= names


def test_train_decode_score(data_dir, capsys, monkeypatch):
    monkeypatch.setenv("HARDMT_RUN_DIR", str(data_dir))
    (data_dir / "run.json").write_text(json.dumps({
        "model": {"d_model": 16, "d_ff": 32, "n_heads": 2, "n_enc_layers": 2, "n_dec_layers": 1},
        "train": {"max_iters": 4, "eval_every": 2, "warmup": 1, "keep_best": 2}}))
    rep = run(capsys, "train", "--data", "data", "--model-type", "ctc-attn", "--config", "run.json", "--out", "m")
    assert rep["steps"] == 4 and len(rep["best"]) == 2
    rep = run(capsys, "decode", "--data", "data", "--checkpoint", "m/final.dsqc", "--beam", 2, "--output", "hyp.tsv")
    assert rep["utterances"] == 3 and 0 <= rep["bleu"]["bleu"] <= 100
    assert len((data_dir / "hyp.tsv").read_text().splitlines()) == 3
    rep = run(capsys, "score", "--hyp", "hyp.tsv", "--ref", "data/test.jsonl")
    assert set(rep) >= {"bleu", "precisions", "brevity_penalty"}
    assert main(["decode", "--data", "data", "--checkpoint", "m/final.dsqc", "--model-type", "rnnt",
                 "--output", "x.tsv"]) == 1


def test_discretize_and_tok(data_dir, capsys, monkeypatch):
    monkeypatch.setenv("HARDMT_RUN_DIR", str(data_dir))
    rep = run(capsys, "discretize", "--features-dir", "data/features", "--k", 24, "--units-out", "units.txt",
              "--model-out", "k.dsqk")
    assert rep["k"] == 24 and rep["utterances"] == 26
    rep = run(capsys, "tok", "train", "--model", "u.unigram", "--input", "units.txt", "--kind", "unit", "--size", 40)
    assert rep["pieces"] <= 40
    run(capsys, "tok", "encode", "--model", "u.unigram", "--input", "units.txt", "--output", "u.ids")
    (data_dir / "plain.ids").write_text("".join(ln.split("\t")[1] + "\n"
                                                for ln in (data_dir / "u.ids").read_text().splitlines()))
    run(capsys, "tok", "decode", "--model", "u.unigram", "--input", "plain.ids", "--output", "back.txt")
    units = [ln.split("\t")[1] for ln in (data_dir / "units.txt").read_text().splitlines()]
    assert (data_dir / "back.txt").read_text().splitlines() == units
    (data_dir / "t.ids").write_text("a\t5 6\n7\n")
    run(capsys, "tok", "upsample", "--input", "t.ids", "--factor", 3, "--output", "t.up")
    assert (data_dir / "t.up").read_text() == "a\t5 5 5 6 6 6\n7 7 7\n"
    rep = run(capsys, "tok", "joint-vocab", "--speech", "u.unigram", "--text", "data/src.unigram",
              "--output", "cross.vocab")
    assert rep["size"] == 5 + rep["speech_tokens"] + rep["text_tokens"]


def test_ablate_ratios_only(capsys):
    rep = run(capsys, "ablate", "--factors", "none,2", "--no-train", "--n-train", 100)
    assert rep["rows"][0]["length_ratio"] is None
    assert rep["rows"][1]["length_ratio"] == pytest.approx(3.0, abs=0.01)


def test_errors_exit_nonzero(tmp_path):
    assert main(["discretize", "--features-dir", str(tmp_path), "--units-out", str(tmp_path / "u")]) == 1
    with pytest.raises(SystemExit):
        main(["train"])
