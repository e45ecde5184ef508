import random
import warnings

import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import TINY, TinyScoreNet, make_payload, randomize_
from stegodiff.objectives import EmbedConfig, FidelitySource, accuracy_loss, combined_loss, fidelity_loss
from stegodiff.peft import (LoraAdapter, PeftConfig, SensitivityMap, accumulate_sensitivity,
                            adapters, full_finetune, inject_lora, layer_kinds, lora_param_groups, merge_lora,
                            optimize, quantile_threshold, select_layers)
from stegodiff.score_net import UNet, UNetConfig, build_net, clone_frozen, count_params, layer_table, param_checksum


class MaskedBranchNet(TinyScoreNet):
    """TinyScoreNet plus a branch that is multiplied by zero before reaching the output."""

    def __init__(self):
        super().__init__(channels=3, hidden=4)
        self.dead = nn.Conv2d(3, 3, 1)

    def forward(self, x, t):
        return super().forward(x, t) + 0.0 * self.dead(x)


def _source(n=8, shape=(3, 8, 8)):
    return FidelitySource(torch.rand(n, *shape, generator=torch.Generator().manual_seed(0)) * 2 - 1, "t", "surrogate_folder")


def _batches(k, sched, n=4, seed=0, shape=(3, 8, 8)):
    rng = np.random.default_rng(seed)
    src = _source(shape=shape)
    return [src.draw(n, sched, rng) for _ in range(k)]


def test_disconnected_parameter_scores_zero(sched100):
    torch.manual_seed(0)
    net = MaskedBranchNet()
    cfg = EmbedConfig([make_payload()], lam=1.0)
    smap = accumulate_sensitivity(net, clone_frozen(MaskedBranchNet()), cfg, sched100, 3,
                                  batches=_batches(3, sched100))
    assert torch.count_nonzero(smap.scores["dead.weight"]) == 0
    assert torch.count_nonzero(smap.scores["dead.bias"]) == 0
    assert smap.scores["conv2.weight"].sum() > 0


def test_single_iteration_oracle(sched100):
    net = randomize_(build_net(TINY, seed=0))
    frozen = clone_frozen(randomize_(build_net(TINY, seed=0), seed=3))
    cfg = EmbedConfig([make_payload()], lam=0.7)
    batch = _batches(1, sched100)
    smap = accumulate_sensitivity(net, frozen, cfg, sched100, 1, batches=batch)
    loss, _ = combined_loss(net, frozen, cfg, batch[0], sched100)
    net.zero_grad()
    loss.backward()
    for name, p in net.named_parameters():
        assert torch.allclose(smap.scores[name], p.grad.double() ** 2, rtol=0, atol=1e-10)


def test_pre_edit_scores_scale_with_n(sched100):
    # at net == frozen the fidelity gradient vanishes and the payload term is fixed by the key,
    # so every iteration adds the same squared gradient
    net = randomize_(build_net(TINY, seed=0))
    cfg = EmbedConfig([make_payload()], lam=1.0)
    g1 = accumulate_sensitivity(net, clone_frozen(net), cfg, sched100, 1, batches=_batches(1, sched100))
    g5 = accumulate_sensitivity(net, clone_frozen(net), cfg, sched100, 5, batches=_batches(5, sched100, seed=1))
    for name in g1.scores:
        torch.testing.assert_close(g5.scores[name], 5 * g1.scores[name], rtol=1e-6, atol=1e-12)


def test_accumulation_monotone_and_no_update(sched100):
    net = randomize_(build_net(TINY, seed=0))
    frozen = clone_frozen(randomize_(build_net(TINY, seed=0), seed=3))
    cfg = EmbedConfig([make_payload()])
    before = param_checksum(net)
    bs = _batches(6, sched100)
    g3 = accumulate_sensitivity(net, frozen, cfg, sched100, 3, batches=bs)
    g6 = accumulate_sensitivity(net, frozen, cfg, sched100, 6, batches=bs)
    assert param_checksum(net) == before
    for name in g3.scores:
        assert (g6.scores[name] >= g3.scores[name]).all()
        assert (g3.scores[name] >= 0).all()
        assert g3.scores[name].shape == dict(net.named_parameters())[name].shape


def test_sensitivity_seed_reproducible(sched100):
    net = randomize_(build_net(TINY, seed=0))
    frozen = clone_frozen(net)
    cfg = EmbedConfig([make_payload()], fidelity_batch=4)
    a = accumulate_sensitivity(net, frozen, cfg, sched100, 2, source=_source(), seed=5)
    b = accumulate_sensitivity(net, frozen, cfg, sched100, 2, source=_source(), seed=5)
    assert all(torch.equal(a.scores[k], b.scores[k]) for k in a.scores)


def test_n_iters_must_be_positive(sched100):
    net = build_net(TINY, seed=0)
    with pytest.raises(ValueError):
        accumulate_sensitivity(net, net, EmbedConfig([make_payload()]), sched100, 0)


def _smap(sizes, fill):
    return SensitivityMap({f"{k}.weight": fill(k, n) for k, n in sizes.items()}, 1, 0)


def test_uniform_scores_rank_by_size():
    sizes = {"a": 30, "b": 500, "c": 120, "d": 7}
    sel = select_layers(_smap(sizes, lambda k, n: torch.ones(n, dtype=torch.float64)), 0.01, 2)
    assert [p for p, _ in sel.ranking] == ["b", "c", "a", "d"]
    assert dict(sel.ranking) == sizes
    assert sel.selected == ["b", "c"]


def test_quantile_hits_target_exactly():
    rng = np.random.default_rng(0)
    sizes = {"l0": 400_000, "l1": 350_000, "l2": 250_000}
    smap = _smap(sizes, lambda k, n: torch.from_numpy(rng.exponential(size=n)))
    sel = select_layers(smap, 0.01, 3)
    assert sel.n_total == 10**6
    assert abs(sel.n_sensitive - 10**4) <= 1
    flat = np.sort(np.concatenate([smap.scores[k].numpy() for k in sorted(smap.scores)]))[::-1]
    assert sel.tau == flat[10**4 - 1]
    assert sum(c for _, c in sel.ranking) == sel.n_sensitive


def test_law_of_triviality():
    def fill(k, n):
        if k == "X":
            return torch.ones(n, dtype=torch.float64)
        y = torch.full((n,), 0.9, dtype=torch.float64)
        y[:5] = 2.0
        return y

    smap = _smap({"X": 10, "Y": 10**6}, fill)
    assert smap.scores["Y.weight"].sum() > smap.scores["X.weight"].sum()
    sel = select_layers(smap, 15 / (10**6 + 10), 1)
    assert sel.ranking == [("X", 10), ("Y", 5)]
    assert sel.selected == ["X"]


def test_ties_broken_by_path_and_order_invariant():
    rng = np.random.default_rng(1)
    sizes = {f"layer{i}": 50 for i in range(6)}
    scores = {f"{k}.weight": torch.from_numpy(rng.random(n)) for k, n in sizes.items()}
    shuffled = list(scores.items())
    random.Random(0).shuffle(shuffled)
    a = select_layers(SensitivityMap(scores, 1, 0), 0.1, 3)
    b = select_layers(SensitivityMap(dict(shuffled), 1, 0), 0.1, 3)
    assert a.to_dict() == b.to_dict()
    tied = select_layers(_smap({"b": 10, "a": 10}, lambda k, n: torch.ones(n, dtype=torch.float64)), 0.5, 1)
    assert tied.selected == ["a"]


def test_eta_larger_than_layers_warns():
    smap = _smap({"a": 10, "b": 10}, lambda k, n: torch.rand(n, dtype=torch.float64))
    with pytest.warns(UserWarning):
        sel = select_layers(smap, 0.1, 5)
    assert sorted(sel.selected) == ["a", "b"]


def test_select_rejects_bad_args():
    smap = _smap({"a": 10}, lambda k, n: torch.rand(n, dtype=torch.float64))
    for sp in (0.0, 1.0):
        with pytest.raises(ValueError):
            select_layers(smap, sp, 1)
    with pytest.raises(ValueError):
        select_layers(smap, 0.1, 0)


def test_kinds_restrict_selection_to_adaptable():
    net = UNet(TINY)
    kinds = layer_kinds(net)
    smap = SensitivityMap({n: torch.rand(p.shape, dtype=torch.float64) for n, p in net.named_parameters()}, 1, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sel = select_layers(smap, 0.01, 100, kinds)
    assert sel.selected and all(kinds[p] in ("linear", "conv2d") for p in sel.selected)
    assert any(kinds[p] == "norm" for p, _ in sel.ranking)


def test_quantile_threshold_small():
    v = np.array([5.0, 1.0, 3.0, 4.0, 2.0])
    assert quantile_threshold(v, 0.4) == 4.0


@pytest.fixture
def unet():
    return randomize_(build_net(TINY, seed=0))


def test_injection_is_identity(unet):
    x, t = torch.randn(2, 3, 8, 8), torch.tensor([3, 70])
    ref = unet(x, t)
    paths = [p for p, v in layer_table(unet).items() if v["kind"] in ("linear", "conv2d")]
    inject_lora(unet, paths, 4, seed=1, clamp_rank=True)
    assert (unet(x, t) - ref).abs().max() <= 1e-7


def test_trainable_count_and_lr_groups(unet):
    total = count_params(unet)
    paths = ["down.0.blocks.0.conv1", "temb.0", "mid1.conv2"]
    shapes = {p: unet.get_submodule(p).weight.shape for p in paths}
    _, ads = inject_lora(unet, paths, 4, lr=1e-4, lr_ratio=16)
    expected = sum(4 * (s[0] + int(np.prod(s[1:]))) for s in shapes.values())
    assert count_params(unet, trainable_only=True) == expected
    assert {n for n, p in unet.named_parameters() if p.requires_grad} == \
        {f"{p}.{ab}" for p in paths for ab in ("A", "B")}
    assert count_params(unet) == total + expected
    groups = lora_param_groups(ads)
    assert groups[1]["lr"] == pytest.approx(16 * groups[0]["lr"]) and groups[0]["lr"] == 1e-4
    for a in ads:
        assert a.scale == pytest.approx(4 / np.sqrt(4))
        assert torch.count_nonzero(a.B) == 0


def test_default_unet_trainable_fraction():
    net = UNet(UNetConfig())
    total = count_params(net)
    cfg = PeftConfig()
    rank = cfg.effective_rank(net.config.base_channels)
    # the 15 largest adaptable layers bound any selection from above
    sizes = []
    for path, v in layer_table(net).items():
        if v["kind"] in ("linear", "conv2d"):
            w = v["params"]["weight"]
            m, n = w[0], int(np.prod(w[1:]))
            sizes.append((min(rank, m, n) * (m + n), path))
    worst = [p for _, p in sorted(sizes, reverse=True)[:cfg.eta]]
    inject_lora(net, worst, rank, clamp_rank=True)
    assert count_params(net, trainable_only=True) / total <= 0.14


def test_rank_too_large_errors(unet):
    with pytest.raises(ValueError):
        inject_lora(unet, ["temb.0"], 9)  # Linear(8 -> 16): min(m, n) = 8
    net, ads = inject_lora(randomize_(build_net(TINY, seed=0)), ["temb.0"], 9, clamp_rank=True)
    assert ads[0].rank == 8


def test_non_adaptable_layer_skipped(unet):
    norm = next(p for p, v in layer_table(unet).items() if v["kind"] == "norm")
    with pytest.warns(UserWarning):
        _, ads = inject_lora(unet, [norm, "mid1.conv1"], 2)
    assert [a.path for a in ads] == ["mid1.conv1"]


def test_merge_with_zero_b_is_exact(unet):
    ref = {k: v.clone() for k, v in unet.state_dict().items()}
    inject_lora(unet, ["mid1.conv1", "temb.2"], 2)
    merge_lora(unet)
    assert ref.keys() == unet.state_dict().keys()
    assert all(torch.equal(ref[k], v) for k, v in unet.state_dict().items())
    with pytest.raises(ValueError):
        merge_lora(unet)


def _random_ab(adapter, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        adapter.A.copy_(torch.randn(adapter.A.shape, generator=g, dtype=adapter.A.dtype))
        adapter.B.copy_(torch.randn(adapter.B.shape, generator=g, dtype=adapter.B.dtype) * 0.1)


def test_merge_dual_path_linear():
    torch.manual_seed(0)
    layer = nn.Linear(12, 7)
    ad = LoraAdapter(layer, 3, 0.5)
    _random_ab(ad, 1)
    x = torch.randn(5, 12)
    via_adapter = ad(x)
    merged = ad.merged()
    assert (merged(x) - via_adapter).abs().max() <= 1e-6


@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("stride", [1, 2])
def test_merge_dual_path_conv(kernel, stride):
    torch.manual_seed(kernel * 10 + stride)
    holder = nn.Sequential(nn.Conv2d(4, 6, kernel, stride=stride, padding=kernel // 2))
    x = torch.randn(2, 4, 9, 9)
    _, ads = inject_lora(holder, ["0"], 3, alpha=2.0)
    assert ads[0].A.shape == (6, 3) and ads[0].B.shape == (3, 4 * kernel * kernel)
    _random_ab(ads[0], 2)
    via_adapter = holder(x)
    merge_lora(holder)
    assert isinstance(holder[0], nn.Conv2d) and not adapters(holder)
    assert (holder(x) - via_adapter).abs().max() <= 1e-6


def test_merge_dual_path_unet(unet, sched100):
    paths = ["down.0.blocks.0.conv1", "mid1.temb_proj", "up.0.blocks.0.skip"]
    paths = [p for p in paths if p in layer_table(unet)]
    inject_lora(unet, paths, 2, seed=3)
    for i, a in enumerate(adapters(unet)):
        _random_ab(a, i)
    x, t = torch.randn(3, 3, 8, 8), torch.tensor([1, 50, 100])
    with torch.no_grad():
        ref = unet(x, t)
        merge_lora(unet)
        assert (unet(x, t) - ref).abs().max() <= 1e-5


def _toy_setup(sched, seed=0):
    net = randomize_(build_net(TINY, seed=0), seed=seed, std=0.05)
    frozen = clone_frozen(net)
    pay = make_payload(timestep=50)
    cfg = EmbedConfig([pay], lam=1.0, fidelity_batch=8)
    return net, frozen, cfg, pay


def test_full_finetune_zero_steps_and_determinism(sched100):
    net, frozen, cfg, _ = _toy_setup(sched100)
    before = param_checksum(net)
    full_finetune(net, frozen, cfg, sched100, 0, source=_source())
    assert param_checksum(net) == before
    a = full_finetune(clone_frozen(frozen), frozen, cfg, sched100, 5, source=_source(), seed=2)
    b = full_finetune(clone_frozen(frozen), frozen, cfg, sched100, 5, source=_source(), seed=2)
    assert param_checksum(a) == param_checksum(b) != before


def test_full_finetune_vs_peft_tradeoff(trained_tiny):
    """Equal steps and base lr: full fine-tuning fits the payload better but drifts further from the original."""
    base, sched = trained_tiny
    frozen = clone_frozen(base)
    src = FidelitySource.model_generated(frozen, sched, checksum="tiny", pool_size=64, num_steps=20)
    pay = make_payload(timestep=50)
    cfg = EmbedConfig([pay], lam=1.0, fidelity_batch=8)
    steps, peft = 300, PeftConfig(n_iters=10, eta=3, rank=2, rank_ref_width=None)

    full = full_finetune(clone_frozen(frozen), frozen, cfg, sched, steps, source=src, lr=peft.lr, seed=1)

    peft_net = clone_frozen(frozen)
    smap = accumulate_sensitivity(peft_net, frozen, cfg, sched, peft.n_iters, source=src, seed=0)
    sel = select_layers(smap, peft.sparsity, peft.eta, layer_kinds(peft_net))
    _, ads = inject_lora(peft_net, sel, peft.rank, lr=peft.lr, lr_ratio=peft.lr_ratio, clamp_rank=True)
    optimize(peft_net, frozen, cfg, sched, lora_param_groups(ads), steps, source=src, seed=1)
    merge_lora(peft_net)

    evalb = src.draw(256, sched, np.random.default_rng(99))
    with torch.no_grad():
        acc_full, acc_peft = accuracy_loss(full, pay, sched).item(), accuracy_loss(peft_net, pay, sched).item()
        fid_full = fidelity_loss(full, frozen, evalb, sched).item()
        fid_peft = fidelity_loss(peft_net, frozen, evalb, sched).item()
    print(f"full: acc {acc_full:.3f} fid {fid_full:.3f} | peft: acc {acc_peft:.3f} fid {fid_peft:.3f}")
    assert acc_full < acc_peft
    assert fid_full > fid_peft


def test_optimize_rejects_non_finite(sched100):
    net, frozen, cfg, _ = _toy_setup(sched100)
    with torch.no_grad():
        net.conv_out.weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        optimize(net, frozen, cfg, sched100, [{"params": list(net.parameters()), "lr": 1e-3}], 2)


def test_optimize_cosine_anneals_to_zero(sched100):
    net, frozen, cfg, _ = _toy_setup(sched100)
    groups = [{"params": list(net.parameters()), "lr": 1e-3}]
    seen = []
    opt_lr = lambda step: seen.append(groups[0]["lr"])
    optimize(net, frozen, cfg, sched100, groups, 10, source=_source(), lr_decay="cosine", on_step=opt_lr)
    assert all(a > b for a, b in zip(seen, seen[1:]))
    assert seen[-1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        optimize(net, frozen, cfg, sched100, groups, 1, source=_source(), lr_decay="step")
    with pytest.raises(ValueError):
        PeftConfig(lr_decay="linear")


def test_optimize_clips_gradient_norm(sched100):
    net, frozen, cfg, _ = _toy_setup(sched100)
    params = list(net.parameters())
    optimize(net, frozen, cfg, sched100, [{"params": params, "lr": 1e-3}], 3, source=_source(), max_grad_norm=0.01)
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params]))
    assert norm <= 0.01 * (1 + 1e-5)


def test_effective_rank():
    assert PeftConfig().effective_rank(16) == 8
    assert PeftConfig().effective_rank(128) == 64
    assert PeftConfig(rank_ref_width=None).effective_rank(16) == 64
