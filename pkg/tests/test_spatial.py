import numpy as np
import pytest

from dlmdecode.core import Cell, CellKind, DecodeState, Vocab, fresh_state
from dlmdecode.spatial import (
    SpatialConfig,
    SpatialField,
    field_for_state,
    softening,
    spatial_weights,
    w_max,
    w_max_closed_form,
)

V = Vocab(size=8, mask_id=7)


def state_from_flags(flags, prompt_len=0):
    """Build a state whose unmasked pattern matches the boolean flags."""
    cells = []
    for i, f in enumerate(flags):
        if i < prompt_len:
            cells.append(Cell(CellKind.PROMPT, 1))
        elif f:
            cells.append(Cell(CellKind.FINALIZED, 1, step=1))
        else:
            cells.append(Cell(CellKind.MASKED, V.mask_id))
    return DecodeState(vocab=V, prompt_len=prompt_len, cells=cells)


def naive_weights(flags, prompt_len, gamma, window):
    """O(L*D) reference: literal sum over unmasked neighbors within the window."""
    n = len(flags)
    out = []
    for i in range(prompt_len, n):
        acc = 0.0
        for j in range(n):
            d = abs(i - j)
            if 1 <= d <= window and flags[j]:
                acc += gamma**d
        out.append(acc)
    return np.array(out)


def test_config_bounds():
    SpatialConfig(gamma=0.5, window=8)
    for bad in (0.0, 1.0, -0.3, 1.5):
        with pytest.raises(ValueError):
            SpatialConfig(gamma=bad, window=8)
    with pytest.raises(ValueError):
        SpatialConfig(gamma=0.5, window=0)


def test_w_max_frozen_values():
    assert abs(w_max(SpatialConfig(0.5, 8)) - 1.9921875) < 1e-12
    assert w_max(SpatialConfig(0.5, 1)) == 1.0
    # extended-precision reference 14.66456366006668624...; the closed form
    # and the term-by-term sum must both land on it
    cfg = SpatialConfig(0.9, 16)
    assert abs(w_max(cfg) - 14.664563660066686) < 1e-12
    assert abs(w_max_closed_form(cfg) - w_max(cfg)) < 1e-12
    assert abs(w_max_closed_form(SpatialConfig(0.5, 8)) - 1.9921875) < 1e-12


def test_weights_trivial_patterns():
    # fully masked region, no prompt: nothing contributes
    st = state_from_flags([False] * 6)
    assert spatial_weights(st, SpatialConfig(0.5, 8)).tolist() == [0.0] * 6
    # one unmasked cell at j, queried at j+1
    st = state_from_flags([True, False, False])
    w = spatial_weights(st, SpatialConfig(0.5, 8))
    assert w[1] == 0.5
    # both immediate neighbors unmasked: 0.5 + 0.5
    st = state_from_flags([True, False, True])
    w = spatial_weights(st, SpatialConfig(0.5, 8))
    assert w[1] == 1.0


def test_prompt_counts_as_unmasked():
    st = fresh_state(V, [1, 2], gen_len=3)
    w = spatial_weights(st, SpatialConfig(0.5, 2))
    # first generated position sees prompt cells at distance 1 and 2
    assert w[0] == pytest.approx(0.75)
    assert w[1] == pytest.approx(0.25)
    assert w[2] == 0.0


def test_weights_match_naive_oracle():
    rng = np.random.default_rng(21)
    for _ in range(200):
        n = int(rng.integers(1, 64))
        prompt_len = int(rng.integers(0, n + 1))
        if prompt_len == n:  # need at least one generated cell
            prompt_len = n - 1
        flags = rng.random(n) < rng.random()
        flags[:prompt_len] = True
        gamma = float(rng.choice([0.3, 0.5, 0.7, 0.9]))
        window = int(rng.integers(1, 17))
        st = state_from_flags(flags.tolist(), prompt_len)
        got = spatial_weights(st, SpatialConfig(gamma, window))
        want = naive_weights(flags.tolist(), prompt_len, gamma, window)
        assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_weight_monotone_in_unmasking():
    rng = np.random.default_rng(5)
    cfg = SpatialConfig(0.7, 6)
    for _ in range(50):
        n = int(rng.integers(4, 32))
        flags = (rng.random(n) < 0.4).tolist()
        masked_idx = [i for i, f in enumerate(flags) if not f]
        if len(masked_idx) < 2:
            continue
        j = int(rng.choice(masked_idx))
        before = spatial_weights(state_from_flags(flags), cfg)
        flags2 = list(flags)
        flags2[j] = True
        after = spatial_weights(state_from_flags(flags2), cfg)
        for i in range(n):
            if i == j:
                continue
            d = abs(i - j)
            if 1 <= d <= cfg.window:
                assert after[i] == pytest.approx(before[i] + cfg.gamma**d, abs=1e-12)
            else:
                assert after[i] == before[i]


def test_softening_endpoints_and_frozen_midpoint():
    cfg = SpatialConfig(0.5, 8)
    f = softening(np.zeros(3), cfg)
    assert f.phi.tolist() == [0.0, 0.0, 0.0]
    f = softening(np.array([w_max(cfg)]), cfg)
    assert f.phi[0] == 1.0
    # all 8 right-side neighbors unmasked = exactly half the two-sided ceiling
    f = softening(np.array([0.99609375]), cfg)
    assert f.phi[0] == 0.5
    with pytest.raises(ValueError):
        softening(np.array([-0.1]), cfg)
    with pytest.raises(ValueError):
        SpatialField(phi=np.array([1.2]))


def test_saturation_is_exact():
    # interior position with every neighbor unmasked must divide to exactly 1
    for gamma, window in [(0.5, 8), (0.9, 16), (0.3, 3), (0.7311, 5)]:
        cfg = SpatialConfig(gamma, window)
        n = 2 * window + 1
        flags = [True] * n
        flags[window] = False
        st = state_from_flags(flags)
        f = softening(spatial_weights(st, cfg), cfg)
        assert f.phi[window] == 1.0


def test_one_sided_full_window_is_half():
    cfg = SpatialConfig(0.5, 8)
    flags = [False] + [True] * 8  # all right neighbors on, nothing left
    st = state_from_flags(flags)
    f = softening(spatial_weights(st, cfg), cfg)
    assert f.phi[0] == 0.5  # exact because powers of 0.5 are exact binary


def test_short_sequence_window_collapse():
    # when the whole sequence fits inside the window, widening it changes nothing
    rng = np.random.default_rng(9)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        flags = (rng.random(n) < 0.5).tolist()
        st = state_from_flags(flags)
        base_w = n - 1  # smallest window covering every pair
        gamma = float(rng.uniform(0.1, 0.95))
        ref = spatial_weights(st, SpatialConfig(gamma, base_w))
        for wider in (base_w + 1, base_w + 7, 4 * base_w):
            got = spatial_weights(st, SpatialConfig(gamma, wider))
            assert np.array_equal(got, ref)


def test_field_for_state_absolute_addressing():
    st = fresh_state(V, [1, 2, 3], gen_len=4)
    f = field_for_state(st, SpatialConfig(0.5, 2))
    assert f.start == 3
    assert f.phi.shape == (4,)
    assert f.phi_at(3) == f.phi[0]
    assert f.phi_at(6) == f.phi[3]
