"""Loss terms against brute-force oracles plus the documented edge cases."""

import math

import numpy as np
import pytest

from gatefuse import engine, losses
from gatefuse.engine import Value
from gatefuse.gradcheck import Graph, gradcheck
from gatefuse.losses import (BatchEmbeddings, LossConfig, LossError, PairBatch,
                             ablation_mask, total_loss)
from oracles import (pdc_oracle, plc_oracle, pml_oracle, t2t_oracle, unit_rows,
                     v2t_oracle, v2v_oracle)


def make_side(rng, n, d=6, has_v=None, has_t=None, fill=None):
    def rows():
        return unit_rows(rng, n, d) if fill is None else np.tile(fill, (n, 1))

    return BatchEmbeddings(
        f=Value(rows()), v=Value(rows()), t=Value(rows()),
        has_v=np.ones(n, dtype=bool) if has_v is None else np.asarray(has_v),
        has_t=np.ones(n, dtype=bool) if has_t is None else np.asarray(has_t))


def make_batch(rng, n, d=6, **kw):
    return PairBatch(make_side(rng, n, d, **kw), make_side(rng, n, d))


def identical_batch(n, d=6):
    e = np.zeros(d)
    e[0] = 1.0
    return PairBatch(make_side(np.random.default_rng(0), n, d, fill=e),
                     make_side(np.random.default_rng(0), n, d, fill=e))


CFG = LossConfig()


# ---------------------------------------------------------------------------
# v2t

def test_v2t_single_pair_is_zero():
    batch = make_batch(np.random.default_rng(1), 1)
    assert losses.v2t_loss(batch, CFG).item() == pytest.approx(0.0, abs=1e-12)


def test_v2t_identical_embeddings_is_ln_n():
    batch = identical_batch(4)
    assert losses.v2t_loss(batch, CFG).item() == pytest.approx(math.log(4), abs=1e-9)


def test_v2t_one_hot_pair():
    # two orthogonal one-hot pairs at tau=1: each row costs ln(1 + e^-1)
    side = BatchEmbeddings(f=Value(np.eye(2)), v=Value(np.eye(2)),
                           t=Value(np.eye(2)),
                           has_v=np.ones(2, bool), has_t=np.ones(2, bool))
    batch = PairBatch(side, side)
    got = losses.v2t_loss(batch, LossConfig(tau=1.0)).item()
    assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)
    assert got == pytest.approx(0.313262, abs=1e-6)


def test_v2t_matches_oracle():
    rng = np.random.default_rng(2)
    batch = make_batch(rng, 4)
    want = v2t_oracle(batch.side1.v.data, batch.side1.t.data, CFG.tau)
    assert losses.v2t_loss(batch, CFG).item() == pytest.approx(want, abs=1e-9)


def test_v2t_symmetric_variant():
    rng = np.random.default_rng(3)
    batch = make_batch(rng, 3)
    cfg = LossConfig(symmetric_v2t=True)
    want = v2t_oracle(batch.side1.v.data, batch.side1.t.data, cfg.tau,
                      symmetric=True)
    assert losses.v2t_loss(batch, cfg).item() == pytest.approx(want, abs=1e-9)


def test_v2t_skips_samples_missing_a_modality():
    rng = np.random.default_rng(4)
    batch = PairBatch(
        make_side(rng, 3, has_v=[True, False, True], has_t=[True, True, True]),
        make_side(rng, 3))
    keep = [0, 2]
    want = v2t_oracle(batch.side1.v.data[keep], batch.side1.t.data[keep], CFG.tau)
    assert losses.v2t_loss(batch, CFG).item() == pytest.approx(want, abs=1e-9)


def test_v2t_errors_without_usable_samples():
    rng = np.random.default_rng(5)
    batch = PairBatch(
        make_side(rng, 2, has_v=[True, False], has_t=[False, True]),
        make_side(rng, 2))
    with pytest.raises(LossError, match="v2t"):
        losses.v2t_loss(batch, CFG)


# ---------------------------------------------------------------------------
# pml

def test_pml_single_pair_is_zero():
    batch = make_batch(np.random.default_rng(6), 1)
    assert losses.pml_loss(batch, CFG).item() == pytest.approx(0.0, abs=1e-12)


def test_pml_identical_embeddings_is_three_ln_n():
    batch = identical_batch(4)
    assert losses.pml_loss(batch, CFG).item() == pytest.approx(3 * math.log(4),
                                                               abs=1e-9)


def test_pml_matches_oracle():
    rng = np.random.default_rng(7)
    batch = make_batch(rng, 3)
    want = pml_oracle(batch.side1.f.data, batch.side1.v.data,
                      batch.side1.t.data, batch.side2.f.data, CFG.tau)
    assert losses.pml_loss(batch, CFG).item() == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# pdc

def test_pdc_zero_for_aligned_orthogonal_products():
    eye = np.eye(4)
    side = BatchEmbeddings(f=Value(eye), v=Value(eye), t=Value(eye),
                           has_v=np.ones(4, bool), has_t=np.ones(4, bool))
    batch = PairBatch(side, side)
    assert losses.pdc_loss(batch, CFG).item() == 0.0


def test_pdc_single_product_is_zero():
    batch = make_batch(np.random.default_rng(8), 1)
    assert losses.pdc_loss(batch, CFG).item() == 0.0


def test_pdc_matches_hand_hinge_sum():
    rng = np.random.default_rng(9)
    batch = make_batch(rng, 2)
    want = pdc_oracle(batch.side1.f.data, batch.side1.v.data,
                      batch.side1.t.data, CFG.alpha2)
    assert losses.pdc_loss(batch, CFG).item() == pytest.approx(want, abs=1e-9)


def test_pdc_uses_both_sides_when_configured():
    rng = np.random.default_rng(10)
    batch = make_batch(rng, 2)
    cfg = LossConfig(use_both_sides_intra=True)
    f = np.vstack([batch.side1.f.data, batch.side2.f.data])
    v = np.vstack([batch.side1.v.data, batch.side2.v.data])
    t = np.vstack([batch.side1.t.data, batch.side2.t.data])
    assert losses.pdc_loss(batch, cfg).item() == pytest.approx(
        pdc_oracle(f, v, t, cfg.alpha2), abs=1e-9)


# ---------------------------------------------------------------------------
# plc

def test_plc_zero_when_representations_coincide():
    rng = np.random.default_rng(11)
    f = unit_rows(rng, 4, 6)
    side = BatchEmbeddings(f=Value(f), v=Value(f.copy()), t=Value(f.copy()),
                           has_v=np.ones(4, bool), has_t=np.ones(4, bool))
    batch = PairBatch(side, make_side(rng, 4))
    assert losses.plc_loss(batch, CFG).item() == 0.0


def test_plc_zero_when_gaps_below_threshold():
    rng = np.random.default_rng(12)
    f = unit_rows(rng, 3, 8)
    jitter = lambda: f + 0.02 * rng.standard_normal(f.shape)  # noqa: E731
    v = jitter() / np.linalg.norm(jitter(), axis=1, keepdims=True)
    t = jitter() / np.linalg.norm(jitter(), axis=1, keepdims=True)
    side = BatchEmbeddings(f=Value(f), v=Value(v), t=Value(t),
                           has_v=np.ones(3, bool), has_t=np.ones(3, bool))
    batch = PairBatch(side, make_side(rng, 3, 8))
    assert plc_oracle(f, v, t, CFG.alpha3, CFG.k_neighbors) == 0.0
    assert losses.plc_loss(batch, CFG).item() == 0.0


def test_plc_matches_oracle():
    rng = np.random.default_rng(13)
    batch = make_batch(rng, 3)
    cfg = LossConfig(k_neighbors=1)
    want = plc_oracle(batch.side1.f.data, batch.side1.v.data,
                      batch.side1.t.data, cfg.alpha3, 1)
    assert losses.plc_loss(batch, cfg).item() == pytest.approx(want, abs=1e-6)


def test_plc_clamps_k_to_batch():
    rng = np.random.default_rng(14)
    batch = make_batch(rng, 3)
    cfg = LossConfig(k_neighbors=10)
    want = plc_oracle(batch.side1.f.data, batch.side1.v.data,
                      batch.side1.t.data, cfg.alpha3, 2)
    assert losses.plc_loss(batch, cfg).item() == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# v2v / t2t

def test_v2v_hard_term_vanishes_for_separated_batch():
    eye = np.eye(4)
    side = BatchEmbeddings(f=Value(eye), v=Value(eye), t=Value(eye),
                           has_v=np.ones(4, bool), has_t=np.ones(4, bool))
    batch = PairBatch(side, side)
    got = losses.v2v_loss(batch, CFG).item()
    std_only = v2v_oracle(eye, eye, CFG.tau_v, CFG.alpha4, 0)
    assert got == pytest.approx(std_only, abs=1e-9)


def test_v2v_identical_embeddings():
    batch = identical_batch(4)
    assert losses.v2v_loss(batch, CFG).item() == pytest.approx(
        math.log(4) + CFG.alpha4, abs=1e-9)


def test_v2v_single_pair_is_zero():
    batch = make_batch(np.random.default_rng(15), 1)
    assert losses.v2v_loss(batch, CFG).item() == pytest.approx(0.0, abs=1e-12)


def test_v2v_matches_oracle():
    rng = np.random.default_rng(16)
    batch = make_batch(rng, 3)
    cfg = LossConfig(k_hard=1)
    want = v2v_oracle(batch.side1.v.data, batch.side2.v.data,
                      cfg.tau_v, cfg.alpha4, 1)
    assert losses.v2v_loss(batch, cfg).item() == pytest.approx(want, abs=1e-6)


def test_t2t_cases():
    assert losses.t2t_loss(make_batch(np.random.default_rng(17), 1),
                           CFG).item() == pytest.approx(0.0, abs=1e-12)
    assert losses.t2t_loss(identical_batch(8), CFG).item() == pytest.approx(
        math.log(8), abs=1e-9)
    rng = np.random.default_rng(18)
    batch = make_batch(rng, 2)
    want = t2t_oracle(batch.side1.t.data, batch.side2.t.data, CFG.tau_t)
    assert losses.t2t_loss(batch, CFG).item() == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# total

def test_total_all_zero_weights_is_zero():
    batch = make_batch(np.random.default_rng(19), 3)
    total, terms = total_loss(batch, CFG, np.zeros(6))
    assert total.item() == 0.0
    assert set(terms) == set(losses.LOSS_NAMES)


def test_total_single_weight_selects_term():
    batch = make_batch(np.random.default_rng(20), 3)
    total, _ = total_loss(batch, CFG, np.array([1, 0, 0, 0, 0, 0.0]))
    assert total.item() == pytest.approx(losses.v2t_loss(batch, CFG).item(),
                                         abs=1e-12)


def test_total_matches_sum_of_term_oracles():
    rng = np.random.default_rng(21)
    batch = make_batch(rng, 2)
    s1, s2 = batch.side1, batch.side2
    want = (v2t_oracle(s1.v.data, s1.t.data, CFG.tau)
            + pml_oracle(s1.f.data, s1.v.data, s1.t.data, s2.f.data, CFG.tau)
            + pdc_oracle(s1.f.data, s1.v.data, s1.t.data, CFG.alpha2)
            + plc_oracle(s1.f.data, s1.v.data, s1.t.data, CFG.alpha3, CFG.k_neighbors)
            + v2v_oracle(s1.v.data, s2.v.data, CFG.tau_v, CFG.alpha4, CFG.k_hard)
            + t2t_oracle(s1.t.data, s2.t.data, CFG.tau_t))
    total, _ = total_loss(batch, CFG, np.ones(6))
    assert total.item() == pytest.approx(want, abs=1e-6)


def test_ablation_mask_groups():
    np.testing.assert_array_equal(ablation_mask(), np.ones(6))
    np.testing.assert_array_equal(ablation_mask(disable_cmal=True),
                                  [0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(ablation_mask(disable_clal=True),
                                  [1, 1, 0, 0, 1, 1])
    np.testing.assert_array_equal(ablation_mask(disable_imcl=True),
                                  [1, 1, 1, 1, 0, 0])


# ---------------------------------------------------------------------------
# invariants

@pytest.mark.parametrize("seed", range(5))
def test_all_terms_nonnegative(seed):
    batch = make_batch(np.random.default_rng(100 + seed), 4)
    for name in losses.LOSS_NAMES:
        assert losses.loss_terms(batch, CFG)[name].item() >= -1e-12


@pytest.mark.parametrize("seed", range(3))
def test_common_permutation_invariance(seed):
    rng = np.random.default_rng(200 + seed)
    batch = make_batch(rng, 5)
    perm = np.random.default_rng(seed).permutation(5)

    def permute(side):
        return BatchEmbeddings(
            f=Value(side.f.data[perm]), v=Value(side.v.data[perm]),
            t=Value(side.t.data[perm]), has_v=side.has_v[perm],
            has_t=side.has_t[perm])

    shuffled = PairBatch(permute(batch.side1), permute(batch.side2))
    for name in losses.LOSS_NAMES:
        a = losses.loss_terms(batch, CFG)[name].item()
        b = losses.loss_terms(shuffled, CFG)[name].item()
        assert a == pytest.approx(b, abs=1e-9), name


def test_total_gradient_wrt_embeddings_matches_fd():
    rng = np.random.default_rng(22)
    n, d = 3, 5
    params = {name: rng.standard_normal((n, d)) for name in
              ("f1", "v1", "t1", "f2", "v2", "t2")}

    def build(p, _):
        def side(tag):
            return BatchEmbeddings(
                f=engine.l2_normalize(p[f"f{tag}"]),
                v=engine.l2_normalize(p[f"v{tag}"]),
                t=engine.l2_normalize(p[f"t{tag}"]),
                has_v=np.ones(n, bool), has_t=np.ones(n, bool))

        total, _ = total_loss(PairBatch(side(1), side(2)), CFG, np.ones(6))
        return {"loss": total * 1e-3}

    report = gradcheck(Graph(params, build), {}, "loss", seed=5,
                       eps=1e-5, tol=1e-4)
    assert report.passed, report.summary()
