import pytest
import torch

from latte.refiner import (
    LatentProjector,
    MultiHeadCrossAttention,
    RefinerConfig,
    TrajectoryRefiner,
    gradient_check,
    project_latent,
    refiner_grad_check,
)


def tiny_config(**kw):
    base = dict(d=16, n=3, layers=1, heads=2)
    base.update(kw)
    return RefinerConfig(**base)


# --- projection -------------------------------------------------------------


def test_projection_zero_latent_bias_free():
    proj = LatentProjector((2, 2, 2), 6)
    with torch.no_grad():
        proj.proj.bias.zero_()
    out = project_latent(torch.zeros(2, 2, 2), proj)
    assert torch.equal(out, torch.zeros(6))


def test_projection_identity():
    proj = LatentProjector((1, 2, 2), 4)
    with torch.no_grad():
        proj.proj.weight.copy_(torch.eye(4))
        proj.proj.bias.zero_()
    latent = torch.arange(4.0).reshape(1, 2, 2)
    torch.testing.assert_close(project_latent(latent, proj), latent.flatten())


def test_projection_matches_naive_matmul():
    torch.manual_seed(0)
    proj = LatentProjector((2, 3, 3), 5)
    latent = torch.randn(2, 3, 3)
    out = project_latent(latent, proj)
    flat = latent.flatten()
    w = proj.proj.weight.detach()
    b = proj.proj.bias.detach()
    naive = torch.tensor(
        [sum(w[i, j].item() * flat[j].item() for j in range(flat.numel())) + b[i].item()
         for i in range(5)]
    )
    torch.testing.assert_close(out, naive, atol=1e-5, rtol=1e-5)


def test_projection_shape_check():
    proj = LatentProjector((1, 2, 2), 4)
    with pytest.raises(ValueError, match="shape"):
        project_latent(torch.zeros(2, 2, 2), proj)


# --- attention --------------------------------------------------------------


def test_singleton_memory_attention_weight_is_one():
    torch.manual_seed(1)
    attn = MultiHeadCrossAttention(16, heads=2)
    q = torch.randn(2, 3, 16)
    memory = torch.randn(2, 1, 16)
    _, weights = attn(q, memory, need_weights=True)
    assert torch.equal(weights, torch.ones_like(weights))


def test_attention_rows_sum_to_one():
    torch.manual_seed(2)
    attn = MultiHeadCrossAttention(32, heads=4)
    _, weights = attn(torch.randn(2, 5, 32), torch.randn(2, 9, 32), need_weights=True)
    sums = weights.sum(dim=-1)
    torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)


def test_scale_variants_differ():
    torch.manual_seed(3)
    per_head = MultiHeadCrossAttention(16, heads=4, scale="per_head")
    full = MultiHeadCrossAttention(16, heads=4, scale="full")
    full.load_state_dict(per_head.state_dict())
    q, memory = torch.randn(1, 1, 16), torch.randn(1, 6, 16)
    out1, _ = per_head(q, memory)
    out2, _ = full(q, memory)
    assert not torch.allclose(out1, out2)


# --- refine -----------------------------------------------------------------


def test_patch_permutation_invariance():
    torch.manual_seed(4)
    refiner = TrajectoryRefiner(tiny_config(layers=2)).double()
    tokens = torch.randn(2, 3, 16, dtype=torch.float64)
    memory = torch.randn(2, 8, 16, dtype=torch.float64)
    out = refiner(tokens, memory)
    perm = torch.randperm(8)
    out_perm = refiner(tokens, memory[:, perm, :])
    assert (out - out_perm).abs().max().item() < 1e-6


def test_separate_and_joint_agree_for_single_token():
    torch.manual_seed(5)
    sep = TrajectoryRefiner(tiny_config(n=1, mode="separate"))
    joint = TrajectoryRefiner(tiny_config(n=1, mode="joint"))
    joint.load_state_dict(sep.state_dict())
    tokens = torch.randn(3, 1, 16)
    memory = torch.randn(3, 5, 16)
    torch.testing.assert_close(sep(tokens, memory), joint(tokens, memory), atol=1e-6, rtol=0)


def test_separate_stacks_are_isolated():
    torch.manual_seed(6)
    refiner = TrajectoryRefiner(tiny_config())
    tokens = torch.randn(1, 3, 16)
    memory = torch.randn(1, 4, 16)
    base = refiner(tokens, memory)
    with torch.no_grad():
        for p in refiner.stacks[1].parameters():
            p.add_(0.5)
    bumped = refiner(tokens, memory)
    assert torch.equal(base[:, 0], bumped[:, 0])
    assert torch.equal(base[:, 2], bumped[:, 2])
    assert not torch.allclose(base[:, 1], bumped[:, 1])


def test_joint_mode_shares_parameters_across_tokens():
    torch.manual_seed(7)
    refiner = TrajectoryRefiner(tiny_config(mode="joint"))
    assert len(refiner.stacks) == 1
    token = torch.randn(1, 1, 16)
    tokens = token.repeat(1, 3, 1)
    memory = torch.randn(1, 4, 16)
    out = refiner(tokens, memory)
    torch.testing.assert_close(out[:, 0], out[:, 1])
    torch.testing.assert_close(out[:, 1], out[:, 2])


def test_refine_input_validation():
    refiner = TrajectoryRefiner(tiny_config())
    memory = torch.randn(1, 4, 16)
    with pytest.raises(ValueError, match="length"):
        refiner(torch.randn(1, 2, 16), memory)
    with pytest.raises(ValueError, match="width"):
        refiner(torch.randn(1, 3, 8), memory)


def test_non_finite_activations_abort_with_layer_index():
    torch.manual_seed(9)
    refiner = TrajectoryRefiner(tiny_config(layers=2))
    with torch.no_grad():  # blow up the second layer's feed-forward output
        refiner.stacks[0].layers[1].ffn[2].bias.fill_(float("inf"))
    with pytest.raises(FloatingPointError, match="layer 1"):
        refiner(torch.randn(1, 3, 16), torch.randn(1, 4, 16))


def test_scaling_stays_finite_over_wide_range():
    torch.manual_seed(8)
    refiner = TrajectoryRefiner(tiny_config()).double()
    tokens = torch.randn(1, 3, 16, dtype=torch.float64)
    memory = torch.randn(1, 4, 16, dtype=torch.float64)
    for factor in (1e-3, 1.0, 1e3):
        out = refiner(tokens * factor, memory * factor)
        assert torch.isfinite(out).all()


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        RefinerConfig(d=10, heads=4)
    with pytest.raises(ValueError, match="mode"):
        RefinerConfig(d=8, heads=2, mode="parallel")
    with pytest.raises(ValueError, match="scale"):
        RefinerConfig(d=8, heads=2, scale="none")


# --- gradient checking --------------------------------------------------------


def test_refiner_grad_check_passes():
    report = refiner_grad_check(RefinerConfig(d=8, n=2, layers=1, heads=2), tolerance=1e-4)
    assert report.passed, str(report)
    assert report.max_error < 1e-4


def test_grad_check_zero_loss_yields_zero_gradients():
    params = {"w": torch.randn(3, dtype=torch.float64, requires_grad=True)}
    report = gradient_check(params, lambda: params["w"].sum() * 0.0, tolerance=1e-6)
    assert report.passed
    assert report.max_error == 0.0


def test_grad_check_detects_corrupted_block():
    config = RefinerConfig(d=8, n=1, layers=1, heads=2)
    clean = refiner_grad_check(config, tolerance=1e-4, seed=3)
    assert clean.passed

    # recompute autograd gradients, then corrupt one output-projection block
    torch.manual_seed(3)
    from latte.refiner import LatentProjector, TrajectoryRefiner

    projector = LatentProjector((1, 2, 2), 8).double()
    refiner = TrajectoryRefiner(config).double()
    latents = torch.randn(1, 1, 1, 2, 2, dtype=torch.float64)
    memory = torch.randn(1, 4, 8, dtype=torch.float64)
    loss = 0.5 * refiner(projector(latents), memory).square().sum()
    params = {
        **{f"projector.{k}": v for k, v in projector.named_parameters()},
        **{f"refiner.{k}": v for k, v in refiner.named_parameters()},
    }
    grads = torch.autograd.grad(loss, list(params.values()))
    analytic = {name: g.clone() for name, g in zip(params, grads)}
    target = "refiner.stacks.0.layers.0.attn.out_proj.weight"
    analytic[target] += 0.05

    def loss_fn():
        return 0.5 * refiner(projector(latents), memory).square().sum()

    report = gradient_check(params, loss_fn, tolerance=1e-4, analytic_grads=analytic)
    assert not report.passed
    assert report.failed_blocks == [target]


def test_grad_check_rejects_large_configs():
    with pytest.raises(ValueError, match="tiny"):
        refiner_grad_check(RefinerConfig(d=64, n=1, layers=1, heads=2))
