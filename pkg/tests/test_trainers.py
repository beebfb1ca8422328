"""Mode composition, divergence handling, and the combined leap update."""

import numpy as np
import pytest

import mlaan
from mlaan.network import warmup_batch_stats
from mlaan.training import eq10_update, eq11_update
from conftest import make_trainer


def small_batch(trainer, n=6, seed=0):
    gen = np.random.default_rng(seed)
    shape = trainer.backbone.cfg.input_shape
    bx = gen.standard_normal((n, *shape)).astype(np.float32)
    by = gen.integers(0, trainer.backbone.cfg.classes, size=n).astype(np.int64)
    return bx, by


# ---------------------------------------------------------------------------
# which attachments each mode builds
# ---------------------------------------------------------------------------

def test_bp_builds_nothing_extra():
    tr = make_trainer("bp")
    assert tr.heads == {} and tr.cascades == [] and tr.pairs == {}


def test_greedy_heads_only():
    tr = make_trainer("greedy_local", K=4, depth=10)
    assert sorted(tr.heads) == [1, 2, 3]          # module K reuses the classifier
    assert tr.cascades == [] and tr.pairs == {}


def test_mlm_adds_cascades():
    tr = make_trainer("mlm_only", K=4, depth=10, k=2)
    assert sorted(tr.heads) == [1, 2, 3]
    assert [g.start for g in tr.cascades] == [1, 2, 3]
    assert all(g.pair is None for g in tr.cascades)
    assert tr.pairs == {}


def test_lam_pairs_on_every_early_module():
    tr = make_trainer("lam_only", K=4, depth=10, p=1)
    assert sorted(tr.pairs) == [1, 2, 3]
    assert tr.cascades == []
    for j, pair in tr.pairs.items():
        assert pair.owner == j
        later_units = {id(u) for m in tr.modules[j:] for u in m.units}
        assert all(id(src) in later_units for src in pair.sources)


def test_lam_replica_count_clamps_to_available_units():
    # depth 10 -> 8 units over K=4 modules of 2; owner 3 sees only module 4
    tr = make_trainer("lam_only", K=4, depth=10, p=50)
    assert len(tr.pairs[3].phi_prime) == 2
    assert len(tr.pairs[1].phi_prime) == 6


def test_mlaan_pairs_sit_on_cascaded_heads_only():
    tr = make_trainer("mlaan", K=4, depth=10, k=2, p=1)
    # group lasts are modules 2, 3, 4; module 4 ends the net so no pair there
    assert sorted(tr.pairs) == [2, 3]
    by_start = {g.start: g for g in tr.cascades}
    assert by_start[1].pair is tr.pairs[2]
    assert by_start[2].pair is tr.pairs[3]
    assert by_start[3].pair is None


def test_zero_cascade_rate_skips_cascade_machinery():
    net = mlaan.build_backbone(8, 4, 10, (1, 12, 12), seed=9)
    tr = mlaan.Trainer(net, 3, mlaan.TrainerMode(kind="mlaan", k=2, p=0),
                       mlaan.OptimizerConfig(lr=0.1, lr_cascaded=0.0), seed=9)
    assert tr.cascades == [] and tr.pairs == {}
    assert tr.cascade_seed == 0.0


def test_zero_p_skips_replicas():
    tr = make_trainer("mlaan", p=0)
    assert tr.pairs == {}
    assert tr.cascades != []


def test_k1_has_no_heads_even_when_local():
    tr = make_trainer("greedy_local", K=1, depth=6)
    assert tr.heads == {}


def test_all_params_are_uniquely_named():
    tr = make_trainer("mlaan", K=4, depth=10, k=2, p=2)
    names = [p.name for p in tr.all_params]
    assert len(names) == len(set(names))


# ---------------------------------------------------------------------------
# TrainerMode validation
# ---------------------------------------------------------------------------

def test_unknown_mode_rejected():
    with pytest.raises(mlaan.ConfigError):
        mlaan.TrainerMode(kind="semi_local")


def test_unknown_combine_rule_rejected():
    with pytest.raises(mlaan.ConfigError):
        mlaan.TrainerMode(mlaan_rule="averaging")


@pytest.mark.parametrize("r", [0.0, 1.0, -0.2, 1.5])
def test_ema_rate_must_be_interior(r):
    with pytest.raises(mlaan.ConfigError):
        mlaan.TrainerMode(r=r)


def test_negative_p_rejected():
    with pytest.raises(mlaan.ConfigError):
        mlaan.TrainerMode(p=-1)


def test_cascade_span_out_of_range():
    with pytest.raises(mlaan.ConfigError):
        make_trainer("mlm_only", K=3, k=4)
    with pytest.raises(mlaan.ConfigError):
        make_trainer("mlm_only", K=3, k=1)


# ---------------------------------------------------------------------------
# stepping and divergence
# ---------------------------------------------------------------------------

def test_step_reports_losses_for_every_pathway():
    tr = make_trainer("mlaan", K=3, k=2, p=1)
    bx, by = small_batch(tr)
    report = tr.step(bx, by, 0.05)
    assert sorted(report.independent) == [1, 2, 3]
    assert sorted(report.cascaded) == [1, 2]
    assert report.final_loss == report.independent[3]
    assert report.peak_elements > 0


def test_nonfinite_input_aborts_and_clears_grads():
    tr = make_trainer("mlaan", K=3, k=2, p=1, mlaan_rule="literal_eq11")
    bx, by = small_batch(tr)
    bx[0, 0, 0, 0] = np.nan
    with pytest.raises(mlaan.TrainingDiverged):
        tr.step(bx, by, 0.05)
    assert tr._eq11_buffers == {}
    for p in tr.all_params:
        assert not np.any(p.grad)


def test_fit_tolerates_two_bad_steps(tiny_data):
    tr = make_trainer("greedy_local", K=2, depth=6)
    calls = {"n": 0}
    real = tr.step

    def flaky(bx, by, lr_now):
        calls["n"] += 1
        if calls["n"] <= 2:
            raise mlaan.TrainingDiverged("injected")
        return real(bx, by, lr_now)

    tr.step = flaky
    rec = tr.fit(tiny_data, epochs=1, batch_size=16)
    assert len(rec.rows) == 1
    assert tr.step_index == 5  # failed steps still consume indices
    assert calls["n"] == 5


def test_fit_gives_up_after_three_consecutive_failures(tiny_data):
    tr = make_trainer("greedy_local", K=2, depth=6)

    def always_bad(bx, by, lr_now):
        raise mlaan.TrainingDiverged("injected")

    tr.step = always_bad
    with pytest.raises(mlaan.TrainingDiverged):
        tr.fit(tiny_data, epochs=1, batch_size=8)
    assert tr.step_index == 3


def test_epochs_zero_returns_empty_recorder(tiny_data):
    tr = make_trainer("bp")
    rec = tr.fit(tiny_data, epochs=0, batch_size=16)
    assert rec.rows == []


def test_fit_requires_two_samples(tiny_data):
    tr = make_trainer("bp")
    lonely = mlaan.Dataset("lonely", tiny_data.train_x[:1], tiny_data.train_y[:1],
                           tiny_data.test_x, tiny_data.test_y)
    with pytest.raises(mlaan.DataError):
        tr.fit(lonely, epochs=1, batch_size=16)


# ---------------------------------------------------------------------------
# the combined leap update
# ---------------------------------------------------------------------------

def test_both_update_spellings_are_the_same_function():
    gen = np.random.default_rng(11)
    for _ in range(50):
        theta = gen.standard_normal(7)
        lam = gen.standard_normal(7)
        grad = gen.standard_normal(7)
        a = eq10_update(theta, lam, grad, 0.05, 0.99)
        b = eq11_update(theta, lam, grad, 0.05, 0.99)
        assert np.array_equal(a, b)


def test_combined_update_value():
    out = eq10_update(np.array([1.0]), np.array([0.5]), np.array([2.0]), 0.1, 0.9)
    # 1 - 0.9*0.5 - 1.1*0.1*2
    assert out.item() == pytest.approx(1.0 - 0.45 - 0.22)


def test_literal_rule_buffers_are_consumed_each_step():
    tr = make_trainer("mlaan", K=3, k=2, p=1, mlaan_rule="literal_eq11")
    bx, by = small_batch(tr)
    tr.step(bx, by, 0.05)
    assert tr._eq11_buffers == {}


def test_literal_and_teacher_rules_diverge_in_trajectory():
    results = {}
    for rule in ("ema_teacher", "literal_eq11"):
        tr = make_trainer("mlaan", K=3, k=2, p=1, mlaan_rule=rule)
        bx, by = small_batch(tr)
        for _ in range(3):
            tr.step(bx, by, 0.05)
        results[rule] = [p.data.copy() for p in tr.backbone.parameters()]
    same = all(np.array_equal(a, b) for a, b in
               zip(results["ema_teacher"], results["literal_eq11"]))
    assert not same


# ---------------------------------------------------------------------------
# EMA twins
# ---------------------------------------------------------------------------

def test_ema_step_blends_toward_live_copy():
    tr = make_trainer("mlaan", K=3, k=2, p=1, r=0.9)
    pair = tr.pairs[2]
    prime = pair.phi_prime[0].conv.w
    double = pair.phi_double[0].conv.w
    before = double.data.copy()
    prime.data += 1.0
    pair.ema_step()
    expected = before.copy()
    expected *= 0.9
    expected += 0.1 * prime.data
    assert np.array_equal(double.data, expected)


def test_ema_twins_never_require_grad():
    tr = make_trainer("mlaan", K=4, depth=10, k=2, p=2)
    for pair in tr.pairs.values():
        for unit in pair.phi_double:
            assert all(not p.requires_grad for p in unit.parameters())
        for unit in pair.phi_prime:
            assert all(p.requires_grad for p in unit.parameters())


def test_resync_copies_live_weights_into_primes():
    tr = make_trainer("mlaan", K=3, k=2, p=1)
    bx, by = small_batch(tr)
    for _ in range(2):
        tr.step(bx, by, 0.05)
    pair = tr.pairs[2]
    # steps moved the live units away from the stale prime copies
    tr._resync_all()
    snap = [p.data.copy() for u in pair.phi_prime for p in u.parameters()]
    tr._resync_all()  # idempotent once freshly synced
    again = [p.data for u in pair.phi_prime for p in u.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(snap, again))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_mutates_nothing(tiny_data):
    tr = make_trainer("bp")
    warmup_batch_stats(tr.backbone, tiny_data.train_x[:16])
    stats_before = [(bn.running_mean.copy(), bn.running_var.copy())
                    for bn in tr.backbone.batchnorms()]
    first = mlaan.evaluate(tr.backbone, tiny_data.test_x, tiny_data.test_y)
    second = mlaan.evaluate(tr.backbone, tiny_data.test_x, tiny_data.test_y)
    assert first == second
    for bn, (m, v) in zip(tr.backbone.batchnorms(), stats_before):
        assert np.array_equal(bn.running_mean, m)
        assert np.array_equal(bn.running_var, v)


def test_evaluate_error_matches_hand_count(tiny_data):
    tr = make_trainer("bp")
    warmup_batch_stats(tr.backbone, tiny_data.train_x[:16])
    out = mlaan.evaluate(tr.backbone, tiny_data.test_x, tiny_data.test_y)
    preds = []
    for i in range(len(tiny_data.test_x)):
        logits = tr.backbone.forward(
            mlaan.Tensor(tiny_data.test_x[i:i + 1]), training=False).data
        preds.append(int(logits.argmax()))
    hand = float(np.mean(np.asarray(preds) != tiny_data.test_y))
    assert out["test_error"] == pytest.approx(hand, abs=1e-12)
    assert set(out["per_class_accuracy"]) == set(range(10))


def test_evaluate_rejects_empty():
    tr = make_trainer("bp")
    with pytest.raises(mlaan.DataError):
        mlaan.evaluate(tr.backbone, np.empty((0, 1, 12, 12), np.float32),
                       np.empty(0, np.int64))


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------

def test_accum_counts_snapshot_covers_all_params():
    tr = make_trainer("mlaan", K=3, k=2, p=1)
    bx, by = small_batch(tr)
    tr.step(bx, by, 0.05)
    assert set(tr.last_accum_counts) == {p.name for p in tr.all_params}
    # every trainable backbone parameter was reached by at least one loss
    for p in tr.backbone.parameters():
        assert tr.last_accum_counts[p.name] >= 1


def test_cascade_rate_scales_relative_to_local_rate():
    cfg = mlaan.OptimizerConfig(lr=0.2, lr_cascaded=0.05)
    assert cfg.cascade_scale() == pytest.approx(0.25)
    net = mlaan.build_backbone(8, 4, 10, (1, 12, 12), seed=9)
    tr = mlaan.Trainer(net, 3, mlaan.TrainerMode(kind="mlm_only", k=2),
                       cfg, seed=9)
    assert tr.cascade_seed == pytest.approx(0.25)
