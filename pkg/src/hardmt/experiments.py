"""Experiment drivers: train, decode and score on the synthetic task."""

from __future__ import annotations

import logging
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass

import torch

from .bleu import bleu
from .decoding import decode
from .errors import ConfigError
from .model.config import ModelType
from .task import Task, TaskSpec, build_task, length_ratio
from .data import make_mt_example, mix_datasets
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# desk model used by the experiment drivers: small enough for a single CPU core
EXPERIMENT_MODEL = dict(d_model=64, d_ff=128, n_heads=2, n_enc_layers=4, n_dec_layers=2, dropout=0.1)
EXPERIMENT_TRAIN = dict(max_iters=3000, lr=2e-3, warmup=300, eval_every=250, keep_best=4, average_best=4,
                        max_tokens=800)


def decode_set(model, task: Task, triplets, beam_size=10, ctc_weight=0.3):
    return [task.detok(decode(model, t.x.ids, beam_size=beam_size, ctc_weight=ctc_weight)) for t in triplets]


def run_arm(task: Task, model_type, multi: bool, seed: int = 0, train_overrides=None, model_overrides=None,
            beam_size=10, ctc_weight=0.3, out_dir=None, data=None):
    """Train one model on the task and score it on the test split."""
    mt = ModelType.parse(model_type)
    tcfg = TrainConfig(**{**EXPERIMENT_TRAIN, "seed": seed, **(train_overrides or {})})
    mcfg = task.model_config(mt, **{**EXPERIMENT_MODEL, **(model_overrides or {})})
    data = data if data is not None else task.training_data(multi, seed)
    t0 = time.time()
    with tempfile.TemporaryDirectory() as tmp:
        res = train(tcfg, mcfg, data, task.valid, out_dir or tmp)
    train_s = time.time() - t0
    model = res.model
    model.vocabs = task.vocabs()
    hyps = decode_set(model, task, task.test, beam_size, ctc_weight)
    rep = bleu(hyps, task.test_refs)
    log.info("%s %s seed %d: BLEU %.2f (%.0fs)", mt.value, "multi" if multi else "single", seed, rep.bleu, train_s)
    return {
        "model_type": mt.value,
        "multi": multi,
        "seed": seed,
        "bleu": rep.bleu,
        "report": rep.to_dict(),
        "steps": res.steps,
        "train_seconds": train_s,
        "final_valid": res.valid[-1][1] if res.valid else None,
        "hyps": hyps,
        "model": model,
    }


# ---------------------------------------------------------------------------
# single- vs multi-task


ALL_TYPES = (ModelType.CTC, ModelType.RNNT, ModelType.AED, ModelType.CTC_ATTN)


def compare_single_vs_multi(task: Task, model_types=ALL_TYPES, seeds=(0,), **kw):
    """Mean and sd of test BLEU for every (model type, single/multi) arm.

    Both arms use the same iteration budget; the single-task arm is the
    multi-task code path with an empty MT list.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    rows = []
    for mt in model_types:
        for multi in (False, True):
            scores = [run_arm(task, mt, multi, s, **kw)["bleu"] for s in seeds]
            rows.append({
                "model_type": ModelType.parse(mt).value,
                "arm": "multi" if multi else "single",
                "bleu_mean": statistics.fmean(scores),
                "bleu_sd": statistics.stdev(scores) if len(scores) > 1 else 0.0,
                "bleu": scores,
            })
    return rows


# ---------------------------------------------------------------------------
# up-sampling ablation


@dataclass
class AblationRow:
    mt_enabled: bool
    upsample_factor: int | None
    length_ratio: float | None
    bleu: float | None

    def to_dict(self):
        return asdict(self)


def ratio_for_factor(task: Task, factor: int) -> float:
    mt = [make_mt_example(t, factor, task.v_cross) for t in task.train_st]
    return length_ratio(task.train_st, mt)


def ablate_upsampling(task: Task, settings, seed=0, train=True, **kw) -> list[AblationRow]:
    """One row per ``(mt_enabled, factor)`` setting.

    The MT twins are rebuilt with each factor; the ratio column is measured
    on the resulting training inputs.  ``train=False`` only measures ratios.
    """
    settings = list(settings)
    if not settings:
        raise ConfigError("no ablation settings")
    rows = []
    for enabled, factor in settings:
        if not enabled:
            ratio, data = None, list(task.train_st)
            factor = None
        else:
            if factor is None or factor < 1:
                raise ConfigError(f"bad up-sampling factor {factor}")
            mt = [make_mt_example(t, factor, task.v_cross) for t in task.train_st]
            ratio = length_ratio(task.train_st, mt)
            data = list(task.train_st) + mt
        score = None
        if train:
            score = run_arm(task, ModelType.CTC_ATTN, enabled, seed, data=mix_datasets(data, [], seed), **kw)["bleu"]
        rows.append(AblationRow(enabled, factor, ratio, score))
    return rows


def ablation_task(seed=0, **overrides) -> Task:
    """Corpus with a speech:text length ratio of exactly 6.

    Each symbol is six distinct latent units that never collapse, speech
    pieces are single units and source pieces single characters.
    """
    spec = TaskSpec(units_per_symbol=(6, 6), distinct_units=True, n_latent_clusters=72, seed=seed,
                    frames_per_unit=(1, 2), **overrides)
    return build_task(spec)


# ---------------------------------------------------------------------------
# decoder transfer from a text model


def run_transfer(task: Task, pretrain_iters=1500, iters=2000, check_at=1000, seed=0,
                 freeze=("feed_forward", "self_attention"), out_dir=None):
    """Text-pretrained decoder vs. training from scratch on the ST data.

    An AED is first trained on the MT examples only and saved; a fresh AED
    takes its decoder with ``freeze`` applied and is trained on the ST
    examples, as is a from-scratch AED with the same seed.  Reports both
    validation curves and whether, at ``check_at``, frozen tensors are
    bit-identical to the text model and cross-attention tensors moved.
    """
    from .model.checkpoint import save_checkpoint
    from .model.network import Seq2Seq
    from .training import decoder_param_names, init_decoder_from_text_model

    base = {**EXPERIMENT_TRAIN, "seed": seed, "average_best": 0}
    mcfg = task.model_config(ModelType.AED, **EXPERIMENT_MODEL)
    st = mix_datasets(task.train_st, [], seed)
    with tempfile.TemporaryDirectory() as tmp:
        root = out_dir or tmp
        text = train(TrainConfig(**{**base, "max_iters": pretrain_iters}), mcfg,
                     mix_datasets([], task.train_mt, seed), task.valid).model
        text.vocabs = task.vocabs()
        save_checkpoint(f"{root}/text.dsqc", text, {"iteration": pretrain_iters})

        torch.manual_seed(seed)
        model = Seq2Seq(mcfg)
        model.vocabs = task.vocabs()
        init_decoder_from_text_model(model, f"{root}/text.dsqc", freeze)
        frozen = decoder_param_names(model, freeze)
        cross = decoder_param_names(model, ["cross_attention"])
        ref = {n: p.detach().clone() for n, p in model.named_parameters() if n in set(frozen) | set(cross)}
        check = {}

        def on_step(it, lb, m):
            if it == check_at:
                now = dict(m.named_parameters())
                check["frozen_identical"] = all(torch.equal(now[n], ref[n]) for n in frozen)
                check["cross_changed"] = all(not torch.equal(now[n], ref[n]) for n in cross)

        tcfg = TrainConfig(**{**base, "max_iters": iters})
        moved = train(tcfg, None, st, task.valid, model=model, on_step=on_step)
        scratch = train(tcfg, mcfg, st, task.valid)
    return {
        "transfer_valid": moved.valid,
        "scratch_valid": scratch.valid,
        "frozen": frozen,
        "frozen_identical": check.get("frozen_identical"),
        "cross_changed": check.get("cross_changed"),
    }
