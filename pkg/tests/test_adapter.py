import numpy as np
import pytest

from intentvc.adapter import (
    AdapterStack,
    AdapterStackConfig,
    BoxAdapter,
    BoxAdapterConfig,
    NormalizedBox,
    count_trainable_params,
    default_heads,
    extract_region,
    global_local_fuse,
    roi_align,
    vit_stack_forward,
)
from intentvc.errors import ConfigurationError, InputError
from intentvc.tensor import LinearLoRA, Tensor, grad_check, layer_norm

from roi_oracle import roi_align_naive


def random_box(rng):
    xs = np.sort(rng.uniform(0, 1, 2))
    ys = np.sort(rng.uniform(0, 1, 2))
    return NormalizedBox(xs[0], ys[0], xs[1], ys[1])


# -- boxes & config ---------------------------------------------------------

def test_box_validation():
    with pytest.raises(InputError):
        NormalizedBox(0.5, 0.1, 0.2, 0.3)
    with pytest.raises(InputError):
        NormalizedBox(0.0, 0.0, 1.2, 0.5)
    assert NormalizedBox.sentinel().is_sentinel
    assert NormalizedBox.from_corners([0, 0, 0, 0], (448, 448)).is_sentinel
    b = NormalizedBox.from_corners([112, 0, 336, 448], (448, 448))
    assert (b.x1, b.y1, b.x2, b.y2) == (0.25, 0.0, 0.75, 1.0)


def test_default_heads():
    assert default_heads(64) == 8
    assert default_heads(8) == 4
    assert default_heads(6) == 3
    assert default_heads(5) == 1


def test_config_errors():
    with pytest.raises(ConfigurationError):
        BoxAdapterConfig(d=6, heads=4)
    with pytest.raises(ConfigurationError):
        BoxAdapterConfig(d=8, roi_h=0)
    with pytest.raises(ConfigurationError):
        AdapterStackConfig(total_layers=2, adapter_layers=3, adapter=BoxAdapterConfig(d=8))


def test_stack_config_json_roundtrip():
    cfg = AdapterStackConfig(6, 5, BoxAdapterConfig(d=8, heads=2, roi_h=2, roi_w=2), seed=3)
    assert AdapterStackConfig.from_dict(cfg.to_dict()) == cfg


# -- roi_align --------------------------------------------------------------

def test_roi_constant_map(rng):
    feat = Tensor(np.full((3, 5, 6), 2.5))
    for _ in range(10):
        out = roi_align(feat, random_box(rng), 3, 2)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-14)


def test_roi_full_box_center_value():
    feat = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    out = roi_align(feat, NormalizedBox(0, 0, 1, 1), 1, 1)
    # oracle: bilinear value at the map centre (0.5, 0.5) in index space
    centre = 0.25 * (0 + 1 + 2 + 3)
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(centre, abs=1e-15)
    assert centre == 1.5


def test_roi_sentinel_gives_zeros():
    feat = Tensor(np.ones((4, 3, 3)), requires_grad=True)
    out = roi_align(feat, NormalizedBox.sentinel(), 2, 3)
    assert out.shape == (4, 2, 3)
    assert not np.any(out.data)


def test_roi_degenerate_box_is_widened():
    feat = Tensor(np.arange(16.0).reshape(1, 4, 4))
    out = roi_align(feat, NormalizedBox(0.5, 0.5, 0.5, 0.5), 1, 1)
    assert np.all(np.isfinite(out.data))
    expected = roi_align_naive(feat.data[0].tolist(), (0.5, 0.5, 0.5, 0.5), 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(expected[0][0], abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_roi_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 7, 2)
    fmap = rng.normal(size=(h, w))
    box = random_box(rng)
    oh, ow = rng.integers(1, 4, 2)
    got = roi_align(Tensor(fmap[None]), box, oh, ow).data[0]
    want = np.array(roi_align_naive(fmap.tolist(), (box.x1, box.y1, box.x2, box.y2), oh, ow))
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_roi_is_differentiable(rng):
    feat = Tensor(rng.uniform(-1, 1, (2, 4, 4)), requires_grad=True)
    box = NormalizedBox(0.1, 0.2, 0.8, 0.7)
    probe = rng.uniform(-1, 1, (2, 3, 3))
    assert grad_check(lambda: (roi_align(feat, box, 3, 3) * probe).sum(), [feat]).max_rel_err <= 1e-6


# -- region extraction ------------------------------------------------------

def small_adapter(rng_seed=0, **kw):
    cfg = BoxAdapterConfig(d=8, heads=2, roi_h=2, roi_w=2, **kw)
    return BoxAdapter(cfg, rng=rng_seed)


def test_extract_region_single_frame_is_composition(rng):
    ad = small_adapter()
    ad.perturb(rng)
    feat = Tensor(rng.normal(size=(1, 8, 4, 4)))
    box = NormalizedBox(0.1, 0.1, 0.6, 0.9)
    manual = roi_align(layer_norm(feat.data[0], ad.ln1_gamma, ad.ln1_beta, axis=0), box, 2, 2)
    assert np.array_equal(extract_region(feat, [box], ad).data[0], manual.data)


def test_extract_region_all_sentinel(rng):
    ad = small_adapter()
    R = extract_region(Tensor(rng.normal(size=(3, 8, 4, 4))), [NormalizedBox.sentinel()] * 3, ad)
    assert R.shape == (3, 8, 2, 2) and not np.any(R.data)


def test_extract_region_matches_per_frame_loop(rng):
    ad = small_adapter()
    ad.perturb(rng)
    feat = rng.normal(size=(2, 8, 4, 4))
    boxes = [random_box(rng), random_box(rng)]
    R = extract_region(Tensor(feat), boxes, ad).data
    for n in range(2):
        ln = layer_norm(Tensor(feat[n]), ad.ln1_gamma, ad.ln1_beta, axis=0)
        assert np.array_equal(R[n], roi_align(ln, boxes[n], 2, 2).data)


def test_extract_region_count_mismatch(rng):
    with pytest.raises(InputError):
        extract_region(Tensor(rng.normal(size=(2, 8, 4, 4))), [NormalizedBox.sentinel()], small_adapter())


# -- global-local fusion ----------------------------------------------------

def test_fresh_adapter_is_identity(rng):
    ad = small_adapter()
    feat = Tensor(rng.normal(size=(2, 8, 4, 4)))
    out = ad(feat, [random_box(rng), NormalizedBox.sentinel()])
    assert np.array_equal(out.data, feat.data)


def test_standard_ffn_init_is_not_identity(rng):
    ad = small_adapter(zero_init_ffn=False)
    feat = Tensor(rng.normal(size=(1, 8, 4, 4)))
    assert not np.array_equal(ad(feat, [random_box(rng)]).data, feat.data)
    assert not np.any(ad.z_weight.data) and not np.any(ad.z_bias.data)


def test_opening_the_gate_changes_output(rng):
    ad = small_adapter()
    ad.z_weight.data[:] = rng.normal(size=(8, 8))
    feat = Tensor(rng.normal(size=(1, 8, 4, 4)))
    assert not np.array_equal(ad(feat, [random_box(rng)]).data, feat.data)


def test_fuse_config_mismatch(rng):
    ad = small_adapter()
    with pytest.raises(ConfigurationError):
        global_local_fuse(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 2, 2))), ad)


def test_adapter_parameter_grads(rng):
    ad = small_adapter()
    ad.perturb(rng)
    feat = Tensor(rng.normal(size=(2, 8, 4, 4)))
    boxes = [random_box(rng), random_box(rng)]
    probe = rng.uniform(-1, 1, (2, 8, 4, 4))
    rep = grad_check(lambda: (ad(feat, boxes) * probe).sum(), ad.parameters())
    assert rep.max_rel_err <= 1e-4, rep.worst


def test_grad_check_on_adapter_sum_output(rng):
    ad = small_adapter()
    ad.perturb(rng)
    feat = Tensor(rng.normal(size=(1, 8, 4, 4)))
    box = [random_box(rng)]
    rep = grad_check(lambda: ad(feat, box).sum(), ad.parameters())
    assert rep.max_rel_err <= 1e-4, rep.worst


def _abs_discrepancy(f, params, step):
    for p in params:
        p.zero_grad()
    f().backward()
    worst = 0.0
    for p in params:
        a = p.grad.copy()
        for i in range(p.size):
            old = p.data.flat[i]
            p.data.flat[i] = old + step
            fp = f().item()
            p.data.flat[i] = old - step
            fm = f().item()
            p.data.flat[i] = old
            worst = max(worst, abs(a.flat[i] - (fp - fm) / (2 * step)))
    return worst


def test_finite_difference_gap_is_second_order(rng):
    # shrinking the step 10x must shrink the autodiff/central-difference gap
    # ~100x; a wrong gradient would leave an O(1) gap instead
    ad = small_adapter()
    ad.perturb(rng)
    feat = Tensor(rng.normal(size=(1, 8, 4, 4)))
    box = [random_box(rng)]
    params = [ad.q_weight, ad.ffn_out_weight, ad.ln2_gamma]
    f = lambda: ad(feat, box).sum()
    coarse = _abs_discrepancy(f, params, 1e-3)
    fine = _abs_discrepancy(f, params, 1e-4)
    assert 30 < coarse / fine < 300


# -- stack --------------------------------------------------------------------

def make_stack(L, k, seed=0, d=8, h=4):
    return AdapterStack(AdapterStackConfig(L, k, BoxAdapterConfig(d=d, heads=2, roi_h=2, roi_w=2), seed=seed))


def test_k0_equals_plain_stack(rng):
    feat = Tensor(rng.normal(size=(2, 8, 4, 4)))
    boxes = [random_box(rng)] * 2
    s = make_stack(3, 0)
    assert np.array_equal(s(feat, boxes).data, vit_stack_forward(feat, boxes, s, use_adapters=False).data)


def test_full_depth_identity_at_init(rng):
    feat = Tensor(rng.normal(size=(2, 8, 4, 4)))
    boxes = [random_box(rng), NormalizedBox.sentinel()]
    with_adapters = make_stack(4, 4)(feat, boxes).data
    plain = make_stack(4, 0)(feat, boxes).data
    assert np.array_equal(with_adapters, plain)


def test_backbone_independent_of_k():
    a, b = make_stack(3, 0), make_stack(3, 3)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.wq.data, lb.wq.data)


def test_adapters_have_independent_parameters():
    s = make_stack(3, 2)
    w2, w3 = s.adapters[2].q_weight.data, s.adapters[3].q_weight.data
    assert not np.array_equal(w2, w3)


def test_last_five_of_six_invocation_pattern(rng):
    s = make_stack(6, 5)
    calls = []
    for l, ad in s.adapters.items():
        orig = ad.forward
        ad.forward = (lambda f, b, l=l, orig=orig: calls.append(l) or orig(f, b))
    s(Tensor(rng.normal(size=(1, 8, 4, 4))), [random_box(rng)])
    assert calls == [2, 3, 4, 5, 6]
    assert s.cfg.adapter_layer_indices == [2, 3, 4, 5, 6]


@pytest.mark.parametrize("shape", [(1, 8, 2, 2), (3, 8, 4, 3), (2, 8, 1, 5)])
def test_shape_preservation(rng, shape):
    s = make_stack(2, 2)
    for ad in s.adapters.values():
        ad.perturb(rng)
    boxes = [random_box(rng) for _ in range(shape[0])]
    assert s(Tensor(rng.normal(size=shape)), boxes).shape == shape


def test_sentinel_safety_trained(rng):
    s = make_stack(2, 2)
    for ad in s.adapters.values():
        ad.perturb(rng, scale=2.0)
    out = s(Tensor(rng.normal(size=(2, 8, 4, 4))), [NormalizedBox.sentinel()] * 2)
    assert np.all(np.isfinite(out.data))


def test_stack_end_to_end_grad_check(rng):
    s = make_stack(3, 2)
    for ad in s.adapters.values():
        ad.perturb(rng)
    feat = Tensor(rng.normal(size=(1, 8, 4, 4)))
    boxes = [random_box(rng)]
    probe = rng.uniform(-1, 1, (1, 8, 4, 4))
    rep = grad_check(lambda: (s(feat, boxes) * probe).sum(), s.parameters())
    assert rep.max_rel_err <= 1e-4, rep.worst


def test_stack_grads_at_coarse_step_with_fourth_order_stencil():
    # at step 1e-3 the two-point stencil's truncation error exceeds 1e-4 on
    # small-gradient entries of this perturbed stack; the four-point stencil
    # at the same step does not
    rng = np.random.default_rng(3)
    s = make_stack(3, 2, seed=3)
    for ad in s.adapters.values():
        ad.perturb(rng)
    feat = Tensor(rng.normal(size=(2, 8, 4, 4)))
    boxes = [random_box(rng), random_box(rng)]
    probe = rng.uniform(-1, 1, (2, 8, 4, 4))
    f = lambda: (s(feat, boxes) * probe).sum()
    assert grad_check(f, s.parameters(), step=1e-3).max_rel_err > 1e-4
    rep = grad_check(f, s.parameters(), step=1e-3, order=4)
    assert rep.max_rel_err <= 1e-4, rep.worst


def test_roi_path_carries_gradient(rng):
    ad = small_adapter()
    ad.perturb(rng)
    box = [NormalizedBox(0.0, 0.0, 0.5, 0.5)]
    x0 = rng.normal(size=(1, 8, 4, 4))

    def input_grad(adapter):
        x = Tensor(x0, requires_grad=True)
        adapter(x, box).sum().backward()
        return x.grad

    full = input_grad(ad)
    ad.k_weight.data[:] = 0.0
    ad.v_weight.data[:] = 0.0
    no_roi = input_grad(ad)
    assert not np.allclose(full, no_roi)


def test_probe_inside_box_changes_region():
    ad = small_adapter()
    box = [NormalizedBox(0.0, 0.0, 0.5, 0.5)]
    probe = np.zeros((1, 8, 4, 4))
    probe[0, 3, 0, 0] = 1.0
    with_probe = extract_region(Tensor(probe), box, ad).data
    without = extract_region(Tensor(np.zeros_like(probe)), box, ad).data
    assert not np.array_equal(with_probe, without)
    far = np.zeros((1, 8, 4, 4))
    far[0, 3, 3, 3] = 1.0
    assert np.array_equal(extract_region(Tensor(far), box, ad).data, without)


# -- parameter counting -----------------------------------------------------

def test_count_k0_is_zero():
    assert count_trainable_params(make_stack(4, 0)) == 0


def test_count_linear_in_k():
    assert count_trainable_params(make_stack(6, 4)) == 2 * count_trainable_params(make_stack(6, 2))


def test_count_closed_form():
    d, ratio = 8, 4
    hid = d * ratio
    layer_norms = 2 * (2 * d)
    qkv = 3 * d * d + 2 * d  # query and value convs carry a bias, key conv does not
    zero_conv = d * d + d
    ffn = (hid * d + hid) + (d * hid + d)
    assert count_trainable_params(make_stack(1, 1)) == layer_norms + qkv + zero_conv + ffn == 864


def test_count_includes_lora():
    lora = LinearLoRA(8, 8, rank=2, rng=0)
    assert count_trainable_params(make_stack(2, 0), lora) == 2 * 8 * 2
