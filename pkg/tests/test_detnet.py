import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from meddet_kit import numcore as nc
from meddet_kit.detnet import (DEFAULT_CONFIGS, ConfigError, HeadOutput, NetConfig, bin_expectation, build,
                               decode_boxes, fc_param_count, flop_count, layer_table, location_centers,
                               param_count, validate_family, with_placement)
from meddet_kit.nmode import SolverSpec
from meddet_kit.numcore import DimensionError, Tensor

TINY = NetConfig("student", 4, (4, 6, 8), (1, 1, 1), 2, 6, 1, nmode2_placement=("head",))


def tally_params(cfg: NetConfig) -> int:
    """Hand tally: each distinct conv counts cin*cout*k*k + cout once."""
    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    total = conv(1, cfg.stem_channels, 3)
    cin = cfg.stem_channels
    for w, d in zip(cfg.stage_widths, cfg.stage_depths):
        total += conv(cin, w, 3) + (d - 1) * conv(w, w, 3)
        cin = w
    used = cfg.stage_widths[-cfg.pyramid_levels:]
    P = cfg.pyramid_channels
    if "backbone" in cfg.nmode2_placement:
        total += sum(conv(c, c, 1) for c in used)
    total += sum(conv(c, P, 1) for c in used) + len(used) * conv(P, P, 3)
    if "fpn" in cfg.nmode2_placement:
        total += len(used) * conv(P, P, 1)
    total += cfg.head_tower_depth * conv(P, P, 3)
    if "head" in cfg.nmode2_placement:
        total += conv(P, P, 1)
    total += conv(P, cfg.num_classes, 3) + conv(P, 4 * (cfg.reg_bins + 1), 3)
    return total


def tally_flops(cfg: NetConfig, size: int = 64) -> int:
    """Hand tally of 2*MACs walking the spatial sizes by repeated halving."""
    def conv(cin, cout, k, hw):
        return 2 * cin * cout * k * k * hw * hw

    hw = size // 2
    total = conv(1, cfg.stem_channels, 3, hw)
    cin = cfg.stem_channels
    sizes = []
    for w, d in zip(cfg.stage_widths, cfg.stage_depths):
        hw //= 2
        total += conv(cin, w, 3, hw) + (d - 1) * conv(w, w, 3, hw)
        cin = w
        sizes.append((w, hw))
    used = sizes[-cfg.pyramid_levels:]
    P, steps = cfg.pyramid_channels, cfg.solver.n_steps
    n_out = 4 * (cfg.reg_bins + 1)
    for c, s in used:
        if "backbone" in cfg.nmode2_placement:
            total += steps * conv(c, c, 1, s)
        total += conv(c, P, 1, s) + conv(P, P, 3, s)
        if "fpn" in cfg.nmode2_placement:
            total += steps * conv(P, P, 1, s)
        total += cfg.head_tower_depth * conv(P, P, 3, s)
        if "head" in cfg.nmode2_placement:
            total += steps * conv(P, P, 1, s)
        total += conv(P, cfg.num_classes, 3, s) + conv(P, n_out, 3, s)
    return total


ALL_PLACEMENTS = [(), ("backbone",), ("fpn",), ("head",), ("backbone", "fpn", "head")]


@pytest.mark.parametrize("role", sorted(DEFAULT_CONFIGS))
@pytest.mark.parametrize("placement", ALL_PLACEMENTS)
def test_counters_match_tally(role, placement):
    cfg = with_placement(DEFAULT_CONFIGS[role], placement)
    assert param_count(cfg) == tally_params(cfg)
    assert flop_count(cfg) == tally_flops(cfg)


def test_built_network_matches_analytic_count():
    for cfg in (TINY, DEFAULT_CONFIGS["student"]):
        assert param_count(build(cfg, 0)) == param_count(cfg)


def test_compression_ratios():
    s, t = DEFAULT_CONFIGS["student"], DEFAULT_CONFIGS["teacher_small"]
    assert param_count(s) / param_count(t) <= 0.35
    assert flop_count(s) / flop_count(t) <= 0.65


def test_fc_param_count():
    assert fc_param_count(3, 4) == 16


def test_strides():
    assert DEFAULT_CONFIGS["student"].strides == [8, 16, 32]
    assert TINY.strides == [8, 16]


def test_family_ordering():
    validate_family(DEFAULT_CONFIGS)
    bad = dict(DEFAULT_CONFIGS)
    bad["student"] = NetConfig("student", 12, (40, 40, 80, 90))
    with pytest.raises(ConfigError, match="student"):
        validate_family(bad)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(stage_widths=(4, 4), stage_depths=(1,))
    with pytest.raises(ConfigError):
        NetConfig(nmode2_placement=("neck",))
    with pytest.raises(ConfigError):
        NetConfig(role="teacher_huge")


def test_forward_shapes():
    net = build(TINY, 0)
    feats, head = net(Tensor(np.zeros((2, 1, 32, 32))))
    assert [f.shape for f in feats.levels] == [(2, 6, 4, 4), (2, 6, 2, 2)]
    assert [c.shape for c in head.class_logits] == [(2, 2, 4, 4), (2, 2, 2, 2)]
    assert [r.shape for r in head.box_dist] == [(2, 36, 4, 4), (2, 36, 2, 2)]


def test_forward_rejects_bad_input():
    net = build(TINY, 0)
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((1, 3, 32, 32))))
    with pytest.raises(DimensionError, match="divisible"):
        net(Tensor(np.zeros((1, 1, 36, 36))))


def test_initial_scores_near_half():
    net = build(TINY, 3)
    _, head = net(Tensor(np.random.default_rng(0).uniform(size=(1, 1, 32, 32))))
    for c in head.class_logits:
        s = 1 / (1 + np.exp(-c.data))
        assert np.all(np.abs(s - 0.5) < 0.05)


def test_build_is_deterministic():
    a, b = build(TINY, 7), build(TINY, 7)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = build(TINY, 8)
    assert not np.array_equal(a.params["stem.weight"].data, c.params["stem.weight"].data)


def _scaled_tower(cfg, scale):
    cfg = NetConfig(**{**cfg.__dict__, "solver": SolverSpec("rk4", 0.125, 5.0)})
    net = build(cfg, 0)
    for k, p in net.params.items():
        if not k.startswith("ode"):
            p.data = p.data * scale
    with nc.no_grad():
        _, head = net(Tensor(np.random.default_rng(1).normal(size=(1, 1, 32, 32)) * scale))
    return np.concatenate([t.data.ravel() for t in head.tower])


def test_head_placement_traps_tower_output():
    out = _scaled_tower(TINY, 8.0)
    assert out.min() >= -0.05 and out.max() <= 1.05


def test_without_nmode2_tower_escapes_unit_interval():
    out = _scaled_tower(with_placement(TINY, ()), 8.0)
    assert out.max() > 1.05


def test_bin_expectation():
    assert bin_expectation(np.zeros(9)) == pytest.approx(4.0)
    one_hot = np.full(9, -50.0)
    one_hot[6] = 50.0
    assert bin_expectation(one_hot) == pytest.approx(6.0)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=9))
def test_bin_expectation_in_range(logits):
    e = bin_expectation(np.array(logits))
    assert -1e-9 <= e <= len(logits) - 1 + 1e-9


def test_location_centers():
    cx, cy = location_centers(2, 3, 8)
    assert cx[0].tolist() == [4, 12, 20] and cy[:, 0].tolist() == [4, 12]


def test_decode_boxes_expectation():
    # single location at stride 8; uniform bins (expectation 4) on every side
    cls = Tensor(np.array([5.0, -5.0]).reshape(1, 2, 1, 1))
    reg = Tensor(np.zeros((1, 4 * 9, 1, 1)))
    dets = decode_boxes(HeadOutput([cls], [reg], [8], 8, []), score_thresh=0.5)
    assert len(dets) == 1 and len(dets[0]) == 1
    np.testing.assert_allclose(dets[0].boxes[0], [4 - 32, 4 - 32, 4 + 32, 4 + 32])
    assert dets[0].labels[0] == 0


def test_decode_respects_cap():
    cls = Tensor(np.zeros((1, 2, 4, 4)))
    reg = Tensor(np.zeros((1, 36, 4, 4)))
    dets = decode_boxes(HeadOutput([cls], [reg], [8], 8, []), score_thresh=0.0, max_per_image=5)
    assert len(dets[0]) == 5


def test_layer_table_shared_head_repeats_per_level():
    names = [r.name for r in layer_table(TINY)]
    assert names.count("head.cls") == TINY.pyramid_levels
    assert names.count("ode.head") == TINY.pyramid_levels
