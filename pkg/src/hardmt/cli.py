"""Command line entry point: ``hardmt <verb> ...``.

Every verb prints a JSON report on stdout; human-readable tables go to
stderr.  Relative paths are resolved against ``$HARDMT_RUN_DIR`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bleu import bleu
from .data import load_triplets, mix_datasets, save_triplets, write_manifest, ManifestRow
from .decoding import decode
from .errors import ConfigError, HardMTError
from .features import read_features, write_features
from .kmeans import KMeansModel, assign, kmeans_train
from .model.checkpoint import load_model, save_checkpoint
from .model.config import ModelConfig, ModelType, PRESETS
from .model.network import Seq2Seq
from .task import TaskSpec, build_task
from .training import TrainConfig, init_decoder_from_text_model, train
from .unigram import UnigramModel, text_to_units, unigram_train, units_to_text
from .vocab import NUM_SPECIALS, TokenSequence, Vocabulary, build_joint_vocab, collapse_repeats, upsample_text

log = logging.getLogger("hardmt")


def run_path(p) -> Path:
    p = Path(p)
    base = os.environ.get("HARDMT_RUN_DIR")
    return p if p.is_absolute() or not base else Path(base) / p


def emit(report, table_rows=None):
    json.dump(report, sys.stdout, indent=1, default=str)
    sys.stdout.write("\n")
    for row in table_rows or []:
        print("  ".join(str(c) for c in row), file=sys.stderr)


# ---------------------------------------------------------------------------
# discretize


def cmd_discretize(a):
    paths = sorted(run_path(a.features_dir).glob("*.dsqf"))
    if not paths:
        raise ConfigError(f"no .dsqf files in {a.features_dir}")
    seqs = [read_features(p) for p in paths]
    if a.kmeans:
        km = KMeansModel.load(run_path(a.kmeans))
    else:
        km = kmeans_train(np.concatenate([s.frames for s in seqs]), a.k, max_iters=a.max_iters, seed=a.seed)
        if a.model_out:
            km.save(run_path(a.model_out))
    lengths = []
    with open(run_path(a.units_out), "w", encoding="utf-8") as f:
        for s in seqs:
            c = assign(km, s)
            if not a.no_collapse:
                c = collapse_repeats(c)
            lengths.append(len(c))
            f.write(f"{s.utterance_id}\t{' '.join(map(str, c.ids))}\n")
    emit({"utterances": len(seqs), "k": km.k, "iterations": km.iterations_run, "inertia": km.final_inertia,
          "mean_units": float(np.mean(lengths))})


# ---------------------------------------------------------------------------
# tok


def _read_lines(path, kind):
    """Unit lines are ``id<TAB>space-separated ints``; char lines are raw text."""
    out = []
    for line in Path(run_path(path)).read_text(encoding="utf-8").splitlines():
        if kind == "unit":
            key, _, ids = line.partition("\t")
            out.append((key, [f"u{i}" for i in ids.split()]))
        else:
            out.append((None, text_to_units(line)))
    return out


def _load_vocab(path):
    """A vocabulary file, or the piece list of a unigram model file."""
    path = run_path(path)
    first = path.read_text(encoding="utf-8").split("\n", 1)[0]
    return UnigramModel.load(path).vocabulary if "\t" in first else Vocabulary.load(path)


def _write_or_show(lines, output):
    text = "\n".join(lines) + "\n"
    if output:
        run_path(output).write_text(text, encoding="utf-8")
    else:
        sys.stderr.write(text)


def cmd_tok(a):
    if a.mode == "joint-vocab":
        if not (a.speech and a.text and a.output):
            raise ConfigError("joint-vocab needs --speech, --text and --output")
        v = build_joint_vocab(_load_vocab(a.speech), _load_vocab(a.text))
        v.save(run_path(a.output))
        emit({"size": len(v), "speech_tokens": v.n_speech, "text_tokens": v.n_text})
        return
    if not a.input:
        raise ConfigError(f"tok {a.mode} needs --input")
    if a.mode == "upsample":
        out = []
        for line in run_path(a.input).read_text(encoding="utf-8").splitlines():
            key, tab, ids = line.rpartition("\t")
            t = upsample_text(TokenSequence("src", [int(i) for i in ids.split()]), a.factor)
            out.append(key + tab + " ".join(map(str, t.ids)))
        _write_or_show(out, a.output)
        emit({"lines": len(out), "mode": a.mode, "factor": a.factor})
        return
    if not a.model:
        raise ConfigError(f"tok {a.mode} needs --model")
    if a.mode == "train":
        corpus = [u for _, u in _read_lines(a.input, a.kind)]
        model = unigram_train(corpus, a.size, kind=a.kind, name=a.name)
        model.save(run_path(a.model))
        emit({"pieces": len(model), "kind": a.kind})
        return
    model = UnigramModel.load(run_path(a.model))
    out = []
    if a.mode == "encode":
        rng = np.random.default_rng(a.seed)
        for key, u in _read_lines(a.input, model.kind):
            t = model.encode_sampled(u, a.alpha, rng=rng) if a.sample else model.encode_viterbi(u)
            out.append(((key + "\t") if key else "") + " ".join(map(str, t.ids)))
    else:
        for line in Path(run_path(a.input)).read_text(encoding="utf-8").splitlines():
            syms = model.decode([int(i) for i in line.split()])
            out.append(" ".join(s[1:] for s in syms) if model.kind == "unit" else units_to_text(syms))
    _write_or_show(out, a.output)
    emit({"lines": len(out), "mode": a.mode})


# ---------------------------------------------------------------------------
# data


def cmd_data(a):
    spec = TaskSpec(**(json.loads(run_path(a.config).read_text()) if a.config else {}))
    task = build_task(spec)
    out = run_path(a.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        rows = []
        for f, src in zip(task.features[split], task.sources[split]):
            write_features(f, out / "features" / f"{f.utterance_id}.dsqf")
            rows.append(ManifestRow(f.utterance_id, f"features/{f.utterance_id}.dsqf", src, task.translate(src)))
        write_manifest(rows, out / f"{split}.tsv")
    save_triplets(out / "train_st.jsonl", task.train_st)
    save_triplets(out / "train_mt.jsonl", task.train_mt)
    save_triplets(out / "valid.jsonl", task.valid,
                  [task.translate(s) for s in task.sources["valid"]])
    save_triplets(out / "test.jsonl", task.test, task.test_refs)
    task.v_tgt.save(out / "tgt.vocab")
    task.v_cross.save(out / "cross.vocab")
    task.speech_tok.save(out / "spe.unigram")
    task.src_tok.save(out / "src.unigram")
    task.kmeans.save(out / "kmeans.dsqk")
    (out / "task.json").write_text(json.dumps(spec.__dict__, indent=1, default=list))
    emit({"out": str(out), "train_st": len(task.train_st), "train_mt": len(task.train_mt),
          "valid": len(task.valid), "test": len(task.test), "cross_vocab": len(task.v_cross),
          "src_vocab": len(task.src_tok), "tgt_vocab": len(task.v_tgt), "speech_text_ratio": task.base_ratio})


# ---------------------------------------------------------------------------
# train / decode / score


def _vocab_sizes(d: Path):
    return dict(input_vocab_size=len(Vocabulary.load(d / "cross.vocab")),
                src_vocab_size=len(UnigramModel.load(d / "src.unigram")),
                tgt_vocab_size=len(Vocabulary.load(d / "tgt.vocab")))


def cmd_train(a):
    d = run_path(a.data)
    run = json.loads(run_path(a.config).read_text()) if a.config else {}
    model_over = dict(run.get("model", {}))
    preset = model_over.pop("preset", None)
    base = dict(PRESETS[preset]) if preset else {}
    mcfg = ModelConfig(model_type=ModelType.parse(a.model_type), **{**base, **model_over, **_vocab_sizes(d)})
    tcfg = TrainConfig(**run.get("train", {}))
    st, _ = load_triplets(d / "train_st.jsonl")
    mt = [] if a.single_task else load_triplets(d / "train_mt.jsonl")[0]
    valid, _ = load_triplets(d / "valid.jsonl")
    model = None
    if a.init_decoder:
        model = Seq2Seq(mcfg)
        model.vocabs = {"tgt": Vocabulary.load(d / "tgt.vocab").id_to_token}
        init_decoder_from_text_model(model, run_path(a.init_decoder), a.freeze.split(","), a.adopt_vocab)
    res = train(tcfg, mcfg, mix_datasets(st, mt, tcfg.seed), valid, run_path(a.out), model=model)
    res.model.vocabs = {"tgt": Vocabulary.load(d / "tgt.vocab").id_to_token}
    final = run_path(a.out) / "final.dsqc"
    save_checkpoint(final, res.model, {"iteration": res.steps, "train": tcfg.to_dict()})
    emit({"final": str(final), "steps": res.steps, "best": res.index.entries, "valid": res.valid},
         [("iter", "valid_loss")] + [(i, f"{v:.4f}") for i, v in res.valid])


def cmd_decode(a):
    d = run_path(a.data)
    model, _ = load_model(run_path(a.checkpoint))
    if a.model_type and ModelType.parse(a.model_type) is not model.cfg.model_type:
        raise ConfigError(f"checkpoint holds a {model.cfg.model_type.value} model, not {a.model_type}")
    tgt = Vocabulary.load(d / "tgt.vocab")
    triplets, refs = load_triplets(d / f"{a.split}.jsonl")
    rows = []
    for t in triplets:
        ids = decode(model, t.x.ids, beam_size=a.beam, ctc_weight=a.ctc_weight, max_len_ratio=a.max_len_ratio)
        rows.append((t.utt_id, " ".join(tgt.id_to_token[i] for i in ids if NUM_SPECIALS <= i < len(tgt))))
    out = run_path(a.output)
    out.write_text("".join(f"{k}\t{h}\n" for k, h in rows), encoding="utf-8")
    report = {"output": str(out), "utterances": len(rows), "model_type": model.cfg.model_type.value}
    if all(r is not None for r in refs):
        report["bleu"] = bleu([h for _, h in rows], refs).to_dict()
    emit(report)


def _read_hyps(path):
    lines = Path(run_path(path)).read_text(encoding="utf-8").splitlines()
    return [ln.split("\t", 1)[1] if "\t" in ln else ln for ln in lines]


def cmd_score(a):
    hyps = _read_hyps(a.hyp)
    if a.ref.endswith(".jsonl"):
        refs = load_triplets(run_path(a.ref))[1]
    else:
        refs = _read_hyps(a.ref)
    rep = bleu(hyps, refs)
    print(str(rep), file=sys.stderr)
    emit(rep.to_dict())


# ---------------------------------------------------------------------------
# experiments


def _parse_factors(s):
    out = []
    for tok in s.split(","):
        tok = tok.strip().lower()
        out.append((False, None) if tok in ("none", "off", "-") else (True, int(tok)))
    return out


def cmd_ablate(a):
    from .experiments import ablate_upsampling, ablation_task

    task = ablation_task(seed=a.seed, n_train_st=a.n_train)
    rows = ablate_upsampling(task, _parse_factors(a.factors), seed=a.seed, train=not a.no_train,
                             train_overrides={"max_iters": a.iters})
    emit({"base_ratio": task.base_ratio, "rows": [r.to_dict() for r in rows]},
         [("mt", "up", "ratio", "bleu")] + [
             ("yes" if r.mt_enabled else "no", r.upsample_factor or "-",
              "-" if r.length_ratio is None else f"{r.length_ratio:.2f}",
              "-" if r.bleu is None else f"{r.bleu:.1f}") for r in rows])


def cmd_compare(a):
    from .experiments import compare_single_vs_multi

    spec = TaskSpec(**(json.loads(run_path(a.config).read_text()) if a.config else {}))
    types = [ModelType.parse(t) for t in a.model_types.split(",")]
    seeds = [int(s) for s in a.seeds.split(",")]
    rows = compare_single_vs_multi(build_task(spec), types, seeds, train_overrides={"max_iters": a.iters})
    emit({"rows": rows}, [("model", "arm", "bleu")] + [
        (r["model_type"], r["arm"], f"{r['bleu_mean']:.2f} ± {r['bleu_sd']:.2f}") for r in rows])


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hardmt", description="Hard-parameter-sharing ST/MT toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("discretize", help="k-means features into collapsed unit sequences")
    s.add_argument("--features-dir", required=True)
    s.add_argument("--k", type=int, default=24)
    s.add_argument("--kmeans", help="existing k-means model; skips training")
    s.add_argument("--model-out")
    s.add_argument("--units-out", required=True)
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-collapse", action="store_true")
    s.set_defaults(func=cmd_discretize)

    s = sub.add_parser("tok", help="unigram piece models, up-sampling and the joint vocabulary")
    s.add_argument("mode", choices=["train", "encode", "decode", "upsample", "joint-vocab"])
    s.add_argument("--model")
    s.add_argument("--input")
    s.add_argument("--output")
    s.add_argument("--kind", choices=["unit", "char"], default="char")
    s.add_argument("--size", type=int, default=100)
    s.add_argument("--name", default="unigram")
    s.add_argument("--sample", action="store_true", help="sample segmentations instead of Viterbi")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--factor", type=int, default=4)
    s.add_argument("--speech", help="speech vocabulary or unit piece model (joint-vocab)")
    s.add_argument("--text", help="text vocabulary or char piece model (joint-vocab)")
    s.set_defaults(func=cmd_tok)

    s = sub.add_parser("data", help="build the synthetic task: features, manifests, vocabularies, triplets")
    s.add_argument("--config", help="JSON with TaskSpec fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_data)

    s = sub.add_parser("train", help="train a model on a data directory")
    s.add_argument("--data", required=True)
    s.add_argument("--model-type", required=True, choices=["ctc", "rnnt", "aed", "ctc-attn", "ctc_attn"])
    s.add_argument("--config", help='run JSON: {"model": {...}, "train": {...}}')
    s.add_argument("--out", required=True)
    s.add_argument("--single-task", action="store_true", help="train on ST triplets only")
    s.add_argument("--init-decoder", help="text-model checkpoint to take the decoder from")
    s.add_argument("--freeze", default="ff,selfattn")
    s.add_argument("--adopt-vocab", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="decode a split with a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--model-type")
    s.add_argument("--split", default="test")
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--ctc-weight", type=float, default=0.3)
    s.add_argument("--max-len-ratio", type=float, default=1.0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="corpus BLEU of hypotheses against references")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True, help="text file (one per line, optional id<TAB>) or triplet .jsonl")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("ablate", help="MT input up-sampling ablation")
    s.add_argument("--factors", default="none,1,2,4,6")
    s.add_argument("--iters", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-train", action="store_true", help="only measure length ratios")
    s.add_argument("--n-train", type=int, default=2000, help="ST training utterances in the ablation corpus")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("compare", help="single- vs multi-task comparison")
    s.add_argument("--config", help="JSON with TaskSpec fields")
    s.add_argument("--model-types", default="ctc,rnnt,aed,ctc-attn")
    s.add_argument("--seeds", default="0")
    s.add_argument("--iters", type=int, default=3000)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        a.func(a)
    except (HardMTError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
