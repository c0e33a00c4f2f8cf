import json
import math

import numpy as np
import pytest
import torch

from toys import TGT_V, toy_config, toy_model
from hardmt.data import Origin, Triplet
from hardmt.errors import ConfigError, FormatError, ShapeError, TruncationError
from hardmt.model.checkpoint import encode_checkpoint, load_checkpoint, load_model, save_checkpoint
from hardmt.model.network import Seq2Seq
from hardmt.training import (CheckpointIndex, Diverged, TrainConfig, average_checkpoints, decoder_param_names,
                             init_decoder_from_text_model, lr_at, train)
from hardmt.vocab import TokenSequence


def copy_data(n=10, seed=0, lo=4, hi=8):
    """Copy task: input, source and target are the same id string without adjacent repeats."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = [int(rng.integers(5, TGT_V))]
        while len(x) < int(rng.integers(lo, hi)):
            t = int(rng.integers(5, TGT_V))
            if t != x[-1]:
                x.append(t)
        out.append(Triplet(TokenSequence("cross", x), TokenSequence("src", x), TokenSequence("tgt", x),
                           Origin.ST, f"c{i}"))
    return out


def small_cfg(**kw):
    args = dict(max_iters=30, lr=3e-3, warmup=10, eval_every=10, keep_best=3, max_tokens=64)
    args.update(kw)
    return TrainConfig(**args)


def test_copy_task_loss_drops_ninety_percent():
    cfg = small_cfg(max_iters=500, lr=3e-3, warmup=50, eval_every=500)
    res = train(cfg, toy_config("ctc", d_model=32, d_ff=64, n_heads=4), copy_data())
    losses = [h[1] for h in res.history]
    assert np.mean(losses[-10:]) <= 0.1 * losses[0]


def test_same_seed_same_parameters():
    a = train(small_cfg(), toy_config("aed"), copy_data()).model.state_dict()
    b = train(small_cfg(), toy_config("aed"), copy_data()).model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_fixed_iteration_budget():
    for n in (3, 40):
        res = train(small_cfg(max_iters=25), toy_config("ctc"), copy_data(n))
        assert res.steps == 25 and len(res.history) == 25


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, warmup=100)
    assert lr_at(cfg, 1) == pytest.approx(1e-5)
    assert lr_at(cfg, 100) == pytest.approx(1e-3)
    assert lr_at(cfg, 400) == pytest.approx(5e-4)
    assert lr_at(TrainConfig(warmup=0), 7) == TrainConfig().lr


def test_config_validation():
    for bad in (dict(max_iters=0), dict(keep_best=0), dict(keep_best=2, average_best=3)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    cfg = small_cfg()
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        train(cfg, toy_config("ctc"), [])


def test_clipping_bounds_post_clip_norm():
    res = train(small_cfg(clip=0.05, lr=1e-2), toy_config("aed"), copy_data())
    clipped = [h for h in res.history if h[3]]
    assert clipped
    assert all(h[2] <= 0.05 * (1 + 1e-5) for h in clipped)


def test_checkpoints_pruned_and_sorted(tmp_path):
    res = train(small_cfg(max_iters=60, eval_every=10, keep_best=3), toy_config("ctc"), copy_data(),
                copy_data(4, seed=1), tmp_path)
    idx = res.index
    assert len(idx) == 3
    assert [e[1] for e in idx.entries] == sorted(e[1] for e in idx.entries)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.dsqc")) == sorted(
        e[0].rsplit("/", 1)[1] for e in idx.entries)
    assert CheckpointIndex.load(tmp_path / "index.json").entries == idx.entries
    assert len(res.valid) == 6


def test_index_sorting_and_pruning(tmp_path):
    idx = CheckpointIndex(2)
    for i, loss in enumerate([3.0, 1.0, 2.0, 1.0]):
        p = tmp_path / f"c{i}"
        p.write_text("x")
        idx.add(p, loss, i)
        assert [e[1] for e in idx.entries] == sorted(e[1] for e in idx.entries)
    assert [(e[1], e[2]) for e in idx.entries] == [(1.0, 1), (1.0, 3)]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c1", "c3"]


def test_divergence_aborts_and_keeps_checkpoints(tmp_path):
    def poison(it, lb, model):
        if it == 25:
            with torch.no_grad():
                model.embed.weight.fill_(float("nan"))

    with pytest.raises(Diverged) as e:
        train(small_cfg(max_iters=40), toy_config("ctc"), copy_data(), None, tmp_path, on_step=poison)
    assert e.value.iteration == 26
    assert len(e.value.index) == 2 and e.value.index.entries[-1][2] <= 20
    assert all(math.isfinite(v.abs().sum()) for v in load_checkpoint(e.value.index.best[0])[1].values())


def test_checkpoint_roundtrip(tmp_path):
    model = toy_model("rnnt", dtype=torch.float32)
    model.vocabs = {"tgt": ["<pad>", "x"]}
    save_checkpoint(tmp_path / "m.dsqc", model, {"iteration": 7})
    back, meta = load_model(tmp_path / "m.dsqc")
    assert back.cfg == model.cfg and meta["iteration"] == 7 and back.vocabs == model.vocabs
    for (n, a), (m, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n == m and torch.equal(a, b)
    assert (tmp_path / "m.dsqc").read_bytes()[:4] == b"DSQC"
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_corruption(tmp_path):
    model = toy_model("ctc", dtype=torch.float32)
    blob = encode_checkpoint(model.cfg, model.state_dict(), {})
    (tmp_path / "cut.dsqc").write_bytes(blob[:-3])
    with pytest.raises(TruncationError):
        load_checkpoint(tmp_path / "cut.dsqc")
    (tmp_path / "bad.dsqc").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.dsqc")


def write_ckpts(tmp_path, tensors_list):
    idx = CheckpointIndex(len(tensors_list))
    for i, sd in enumerate(tensors_list):
        model = toy_model("ctc", dtype=torch.float32)
        model.load_state_dict(sd)
        p = tmp_path / f"a{i}.dsqc"
        save_checkpoint(p, model, {})
        idx.add(p, float(i), i)
    return idx


def test_average_one_is_verbatim(tmp_path):
    sd = toy_model("ctc", dtype=torch.float32).state_dict()
    avg = average_checkpoints(write_ckpts(tmp_path, [sd]), 1)
    assert all(torch.equal(avg[k], sd[k].double()) for k in sd)


def test_average_opposites_is_zero(tmp_path):
    sd = toy_model("ctc", dtype=torch.float32).state_dict()
    neg = {k: -v for k, v in sd.items()}
    avg = average_checkpoints(write_ckpts(tmp_path, [sd, neg]), 2)
    assert all(torch.all(v == 0) for v in avg.values())


def test_average_matches_elementwise_mean(tmp_path):
    sds = [toy_model("ctc", seed=s, dtype=torch.float32).state_dict() for s in range(4)]
    avg = average_checkpoints(write_ckpts(tmp_path, sds), 3)
    for k in sds[0]:
        want = sum(sd[k].double() for sd in sds[:3]) / 3
        assert torch.equal(avg[k], want)
    with pytest.raises(ConfigError):
        average_checkpoints(write_ckpts(tmp_path, sds[:1]), 2)


def test_average_shape_mismatch(tmp_path):
    idx = write_ckpts(tmp_path, [toy_model("ctc", dtype=torch.float32).state_dict()])
    other = toy_model("ctc", dtype=torch.float32, d_ff=24)
    save_checkpoint(tmp_path / "other.dsqc", other, {})
    idx.keep_best = 2
    idx.add(tmp_path / "other.dsqc", 5.0, 9)
    with pytest.raises(ShapeError):
        average_checkpoints(idx, 2)


def test_average_best_loads_mean(tmp_path):
    res = train(small_cfg(max_iters=40, keep_best=3, average_best=3), toy_config("ctc"), copy_data(),
                copy_data(4, seed=1), tmp_path)
    avg = average_checkpoints(res.index, 3)
    sd = res.model.state_dict()
    assert all(torch.equal(sd[k], avg[k].float()) for k in sd)


def text_checkpoint(tmp_path, seed=3, **kw):
    text = toy_model("aed", seed=seed, dtype=torch.float32, **kw)
    text.vocabs = {"tgt": [f"w{i}" for i in range(text.cfg.tgt_vocab_size)]}
    save_checkpoint(tmp_path / "text.dsqc", text, {})
    return text


def test_init_decoder_copies_and_freezes(tmp_path):
    text = text_checkpoint(tmp_path)
    model = toy_model("aed", dtype=torch.float32)
    init_decoder_from_text_model(model, tmp_path / "text.dsqc")
    ref = text.state_dict()
    for n, p in model.named_parameters():
        if n.startswith("decoder."):
            assert torch.equal(p, ref[n])
    frozen = set(decoder_param_names(model, ["feed_forward", "self_attention"]))
    assert frozen and all(not p.requires_grad for n, p in model.named_parameters() if n in frozen)
    assert all(p.requires_grad for n, p in model.named_parameters() if n not in frozen)
    assert any(".cross_attn." in n for n, p in model.named_parameters() if p.requires_grad)

    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train(small_cfg(max_iters=100), None, copy_data(), model=model)
    after = dict(model.named_parameters())
    for n in before:
        if n in frozen:
            assert torch.equal(before[n], after[n]), n
        elif ".cross_attn." in n:
            assert not torch.equal(before[n], after[n]), n


def test_init_decoder_vocab_mismatch(tmp_path):
    text_checkpoint(tmp_path, tgt_vocab_size=TGT_V + 3)
    model = toy_model("aed", dtype=torch.float32)
    with pytest.raises(ConfigError):
        init_decoder_from_text_model(model, tmp_path / "text.dsqc")
    init_decoder_from_text_model(model, tmp_path / "text.dsqc", adopt_vocab=True)
    assert model.cfg.tgt_vocab_size == TGT_V + 3 and len(model.vocabs["tgt"]) == TGT_V + 3
    rng = np.random.default_rng(0)
    data = [Triplet(t.x, t.y_src, TokenSequence("tgt", rng.integers(5, TGT_V + 3, size=2).tolist()), t.origin,
                    t.utt_id) for t in copy_data()]
    res = train(small_cfg(max_iters=10), None, data, model=model)
    assert math.isfinite(res.history[-1][1])


def test_init_decoder_errors(tmp_path):
    text_checkpoint(tmp_path)
    with pytest.raises(ConfigError):
        init_decoder_from_text_model(toy_model("ctc", dtype=torch.float32), tmp_path / "text.dsqc")
    with pytest.raises(ConfigError):
        init_decoder_from_text_model(toy_model("aed", dtype=torch.float32), tmp_path / "text.dsqc", ["bogus"])
    text_checkpoint(tmp_path, d_ff=24)
    with pytest.raises(ShapeError):
        init_decoder_from_text_model(toy_model("aed", dtype=torch.float32), tmp_path / "text.dsqc")


def test_all_parameters_update_in_one_step():
    model = Seq2Seq(toy_config("ctc_attn"))
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    data = copy_data(1)
    train(TrainConfig(max_iters=1, warmup=0, max_tokens=64), None, data, model=model)
    used = set(data[0].x.ids)
    for n, p in model.named_parameters():
        if n == "embed.weight":
            changed = (before[n] != p.detach()).any(1)
            assert set(torch.nonzero(changed).flatten().tolist()) == used
        elif n != "mask_emb":
            assert not torch.equal(before[n], p.detach()), n
