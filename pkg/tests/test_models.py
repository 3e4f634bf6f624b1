import pytest
import torch

from agemorph.conditioning import onehot_batch
from agemorph.errors import InvariantError, NumericError, ShapeError
from agemorph.models import (Discriminator, Generator, MaskPair, ModelConfig, compose)

from oracles import check_gradients


def tiny_generator(seed=0, resolution=(8, 8)):
    torch.manual_seed(seed)
    return Generator(resolution, ModelConfig.tiny())


def tiny_discriminator(seed=0, resolution=(8, 8)):
    torch.manual_seed(seed)
    return Discriminator(resolution, ModelConfig.tiny())


def random_images(b, h=8, w=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, h, w, generator=gen) * 2 - 1


class TestCompose:
    def test_all_ones_attention_is_identity(self):
        x = random_images(4)
        masks = MaskPair(torch.ones(4, 1, 8, 8), torch.rand(4, 3, 8, 8) * 2 - 1)
        out = compose(x, masks)
        assert float((out - x).abs().max()) <= 1e-6

    def test_all_zeros_attention_passes_color(self):
        x = random_images(4)
        color = torch.rand(4, 3, 8, 8) * 2 - 1
        out = compose(x, MaskPair(torch.zeros(4, 1, 8, 8), color))
        assert torch.equal(out, color)

    def test_half_attention_zero_color(self):
        x = random_images(2)
        out = compose(x, MaskPair(torch.full((2, 1, 8, 8), 0.5), torch.zeros(2, 3, 8, 8)))
        assert torch.allclose(out, 0.5 * x, atol=1e-7)

    def test_convex_bounds(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(50):
            x = torch.rand(2, 3, 8, 8, generator=gen) * 2 - 1
            a = torch.rand(2, 1, 8, 8, generator=gen)
            c = torch.rand(2, 3, 8, 8, generator=gen) * 2 - 1
            out = compose(x, MaskPair(a, c))
            lo = torch.minimum(x, c)
            hi = torch.maximum(x, c)
            assert bool((out >= lo - 1e-6).all()) and bool((out <= hi + 1e-6).all())

    def test_attention_out_of_range_rejected(self):
        x = random_images(1)
        with pytest.raises(InvariantError):
            compose(x, MaskPair(torch.full((1, 1, 8, 8), 1.5), torch.zeros(1, 3, 8, 8)))
        with pytest.raises(InvariantError):
            compose(x, MaskPair(torch.full((1, 1, 8, 8), -0.1), torch.zeros(1, 3, 8, 8)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            compose(random_images(1), MaskPair(torch.ones(1, 1, 4, 4),
                                               torch.zeros(1, 3, 4, 4)))


class TestGenerator:
    def test_mask_ranges(self):
        g = tiny_generator()
        with torch.no_grad():
            masks = g(random_images(3), onehot_batch(torch.tensor([0, 2, 4])))
        assert masks.attention.shape == (3, 1, 8, 8)
        assert masks.color.shape == (3, 3, 8, 8)
        assert float(masks.attention.min()) >= 0.0
        assert float(masks.attention.max()) <= 1.0
        assert float(masks.color.abs().max()) <= 1.0

    def test_deterministic_in_eval(self):
        g = tiny_generator().eval()
        x = random_images(2)
        labels = onehot_batch(torch.tensor([1, 3]))
        with torch.no_grad():
            m1 = g(x, labels)
            m2 = g(x, labels)
        assert torch.equal(m1.attention, m2.attention)
        assert torch.equal(m1.color, m2.color)

    def test_target_changes_output(self):
        g = tiny_generator().eval()
        x = random_images(1)
        with torch.no_grad():
            m0 = g(x, onehot_batch(torch.tensor([0])))
            m4 = g(x, onehot_batch(torch.tensor([4])))
        assert not torch.equal(m0.attention, m4.attention) \
            or not torch.equal(m0.color, m4.color)

    def test_head_sharing(self):
        import copy
        g = tiny_generator().eval()
        x = random_images(1)
        labels = onehot_batch(torch.tensor([2]))
        g_trunk = copy.deepcopy(g)
        g_head = copy.deepcopy(g)
        with torch.no_grad():
            g_trunk.trunk[0].weight[0, 0, 0, 0] += 0.5
            g_head.attention_head.bias += 0.25
            before = g(x, labels)
            after_trunk = g_trunk(x, labels)
            after_head = g_head(x, labels)
        # trunk mutation reaches both masks; head mutation only its own
        assert not torch.equal(before.attention, after_trunk.attention)
        assert not torch.equal(before.color, after_trunk.color)
        assert not torch.equal(before.attention, after_head.attention)
        assert torch.equal(before.color, after_head.color)

    def test_resolution_mismatch(self):
        g = tiny_generator()
        with pytest.raises(ShapeError):
            g(torch.zeros(1, 3, 16, 16), onehot_batch(torch.tensor([0])))

    def test_nonfinite_activation_names_layer(self):
        g = tiny_generator()
        with torch.no_grad():
            g.trunk[0].weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError) as exc:
            g(random_images(1), onehot_batch(torch.tensor([0])))
        assert "layer" in str(exc.value)

    def test_parameter_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        g = Generator((8, 8), ModelConfig.tiny()).double()
        x = random_images(2, seed=5).double()
        labels = onehot_batch(torch.tensor([1, 4]))
        probe = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(9)).double()

        def scalar():
            out = compose(x, g(x, labels))
            return (out * probe).sum()

        params = [p for p in g.parameters()]
        check_gradients(scalar, params, n_coords=20, seed=11, rel_tol=1e-4)


class TestDiscriminator:
    def test_output_shapes(self):
        d = tiny_discriminator()
        out = d(random_images(4))
        assert out.critic.shape == (4,)
        assert out.logits.shape == (4, 5)

    def test_deterministic(self):
        d = tiny_discriminator().eval()
        x = random_images(2)
        with torch.no_grad():
            o1, o2 = d(x), d(x)
        assert torch.equal(o1.critic, o2.critic)
        assert torch.equal(o1.logits, o2.logits)

    def test_heads_disjoint_after_trunk(self):
        d = tiny_discriminator().eval()
        x = random_images(2)
        with torch.no_grad():
            before = d(x)
            d.classifier_head.weight += 1.0
            after = d(x)
        assert torch.equal(before.critic, after.critic)
        assert not torch.equal(before.logits, after.logits)

    def test_critic_loss_leaves_classifier_head_ungradiented(self):
        d = tiny_discriminator()
        loss = d(random_images(3)).critic.mean()
        loss.backward()
        assert d.classifier_head.weight.grad is None \
            or not d.classifier_head.weight.grad.any()
        assert d.trunk[0].weight.grad is not None
        assert d.trunk[0].weight.grad.abs().sum() > 0

    def test_resolution_mismatch(self):
        d = tiny_discriminator()
        with pytest.raises(ShapeError):
            d(torch.zeros(1, 3, 4, 4))


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(InvariantError):
            ModelConfig(gen_base_channels=0)
        with pytest.raises(InvariantError):
            ModelConfig(disc_layers=0)

    def test_resolution_divisibility(self):
        with pytest.raises(ShapeError):
            Generator((10, 10), ModelConfig(gen_down_blocks=2))
        with pytest.raises(ShapeError):
            Discriminator((10, 10), ModelConfig(disc_layers=2))
