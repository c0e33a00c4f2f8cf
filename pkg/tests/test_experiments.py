import pytest

from hardmt.data import Origin, mix_datasets
from hardmt.errors import ConfigError
from hardmt.experiments import ablate_upsampling, ablation_task, compare_single_vs_multi, run_arm
from hardmt.model.config import ModelType
from hardmt.task import TaskSpec, build_task, length_ratio

TINY_TRAIN = dict(max_iters=3, eval_every=3, warmup=1, keep_best=1, average_best=0)


@pytest.fixture(scope="module")
def tiny_task():
    return build_task(TaskSpec(n_train_st=30, n_valid=4, n_test=4, seed=1))


def test_ablation_ratios_follow_factor():
    task = ablation_task(n_train_st=200, n_valid=4, n_test=4)
    assert task.base_ratio == pytest.approx(6.0, abs=0.05)
    rows = ablate_upsampling(task, [(False, None), (True, 1), (True, 2), (True, 4), (True, 6)], train=False)
    assert rows[0].length_ratio is None and rows[0].upsample_factor is None and rows[0].bleu is None
    assert rows[1].length_ratio == pytest.approx(task.base_ratio, rel=1e-12)
    for row, want in zip(rows[2:], (3.0, 1.5, 1.0)):
        assert row.length_ratio == pytest.approx(want, abs=0.01)


def test_ablation_settings_validated(tiny_task):
    with pytest.raises(ConfigError):
        ablate_upsampling(tiny_task, [], train=False)
    with pytest.raises(ConfigError):
        ablate_upsampling(tiny_task, [(True, 0)], train=False)


def test_task_mt_twins_are_upsampled(tiny_task):
    st = {t.utt_id: t for t in tiny_task.train_st}
    for mt in tiny_task.train_mt[:5]:
        assert len(mt.x) == tiny_task.spec.upsample * len(st[mt.utt_id].y_src)
    assert length_ratio(tiny_task.train_st) == tiny_task.base_ratio


def test_single_arm_is_empty_mt_code_path(tiny_task):
    single = tiny_task.training_data(False, 0)
    assert [t.key() for t in single] == [t.key() for t in mix_datasets(tiny_task.train_st, [], 0)]
    assert {t.origin for t in single} == {Origin.ST}
    assert {t.origin for t in tiny_task.training_data(True, 0)} == {Origin.ST, Origin.MT}


def test_compare_reports_eight_arms(tiny_task):
    rows = compare_single_vs_multi(tiny_task, seeds=(0, 1), train_overrides=TINY_TRAIN, beam_size=2)
    assert [(r["model_type"], r["arm"]) for r in rows] == [
        (t, a) for t in ("ctc", "rnnt", "aed", "ctc_attn") for a in ("single", "multi")]
    for r in rows:
        assert len(r["bleu"]) == 2 and 0.0 <= r["bleu_mean"] <= 100.0 and r["bleu_sd"] >= 0.0
    with pytest.raises(ConfigError):
        compare_single_vs_multi(tiny_task, seeds=())


def test_run_arm_fixed_budget(tiny_task):
    for multi in (False, True):
        out = run_arm(tiny_task, ModelType.AED, multi, train_overrides=TINY_TRAIN, beam_size=2)
        assert out["steps"] == 3 and len(out["hyps"]) == 4
