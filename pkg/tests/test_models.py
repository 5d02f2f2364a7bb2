import numpy as np
import pytest
import torch

from gapadapt.datasets import SyntheticShiftSpec, generate_synthetic_pair, split
from gapadapt.models import (
    ClipTeacher,
    MockTeacher,
    PromptContext,
    TargetModel,
    TeacherUnavailable,
    accuracy,
    model_hash,
    pretrain_source,
)


class TestTargetModel:
    def test_shapes_and_simplex(self):
        m = TargetModel(3, 5).eval()
        probs = m(torch.randn(8, 3)).softmax(1)
        assert probs.shape == (8, 5)
        assert torch.allclose(probs.sum(1), torch.ones(8))

    def test_finite_for_large_inputs(self):
        m = TargetModel(4, 3).eval()
        x = torch.randn(64, 4)
        x = 1e3 * x / x.norm(dim=1, keepdim=True)
        assert torch.isfinite(m(x)).all()

    def test_head_is_weight_normalized(self):
        m = TargetModel(2, 3)
        names = dict(m.classifier.named_parameters())
        assert "parametrizations.weight.original0" in names
        assert isinstance(m.bottleneck[1], torch.nn.BatchNorm1d)

    def test_conv_backbone(self):
        m = TargetModel((3, 16, 16), 4, backbone="conv", hidden=16).eval()
        assert m(torch.randn(2, 3, 16, 16)).shape == (2, 4)

    def test_unknown_backbone(self):
        with pytest.raises(ValueError):
            TargetModel(2, 3, backbone="transformer")


class TestPretrain:
    def test_separable_blobs(self):
        spec = SyntheticShiftSpec(num_classes=2, samples_per_class=200, radius=4.0, cluster_std=0.5, seed=1)
        src, _ = generate_synthetic_pair(spec)
        train, held = split(src, 0.7, seed=1)
        torch.manual_seed(1)
        m, _ = pretrain_source(TargetModel(2, 2), train.features, train.labels, epochs=20, seed=1)
        assert accuracy(m, held.features, held.labels) >= 0.99

    def test_zero_epochs(self):
        torch.manual_seed(0)
        m = TargetModel(2, 3)
        before = model_hash(m)
        pretrain_source(m, torch.randn(10, 2), torch.arange(10) % 3, epochs=0)
        assert model_hash(m) == before

    def test_fixed_seed_reproducible(self):
        x, y = torch.randn(100, 2), torch.arange(100) % 3
        hashes = []
        for _ in range(2):
            torch.manual_seed(4)
            m, _ = pretrain_source(TargetModel(2, 3), x, y, epochs=3, seed=4)
            hashes.append(model_hash(m))
        assert hashes[0] == hashes[1]

    def test_errors(self):
        with pytest.raises(ValueError):
            pretrain_source(TargetModel(2, 3), torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))
        with pytest.raises(ValueError):
            pretrain_source(TargetModel(2, 3), torch.zeros(4, 2), torch.tensor([0, 1, 2, 3]))


def orthogonal_teacher(**kw):
    # identity projection: inputs live directly in the embedding space
    return MockTeacher(torch.eye(4), torch.eye(4)[:3] * 2.0, **kw)


class TestMockTeacher:
    def test_aligned_input_wins(self):
        t = orthogonal_teacher()
        x = torch.tensor([[0.0, 1.0, 0.1, 0.0]])
        probs = t.predict(x, t.make_context())
        assert probs.argmax(1).item() == 1
        assert torch.allclose(probs.sum(1), torch.ones(1))

    def test_offset_toward_input_raises_class_monotonically(self):
        t = orthogonal_teacher()
        gen = torch.Generator().manual_seed(0)
        for x in torch.randn(20, 1, 4, generator=gen):
            direction = torch.nn.functional.normalize(x @ t.projection, dim=1)[0]
            probs = []
            for lam in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0]:
                ctx = t.make_context(per_class=True)
                with torch.no_grad():
                    ctx.context[2, 0] = lam * direction
                probs.append(t.predict(x, ctx)[0, 2].item())
            assert all(b >= a for a, b in zip(probs, probs[1:])) and probs[-1] > probs[0]

    def test_shared_offset_flattens_instead(self):
        # a shared offset moves every class prompt the same way, so a huge one
        # makes all prompts alike and the output tends to uniform
        t = orthogonal_teacher()
        ctx = t.make_context()
        with torch.no_grad():
            ctx.context[0] = 1e4 * t.class_embeddings[2]
        probs = t.predict(torch.randn(10, 4), ctx)
        assert torch.allclose(probs, torch.full_like(probs, 1 / 3), atol=1e-3)

    def test_deterministic(self):
        t = orthogonal_teacher()
        x = torch.randn(6, 4)
        ctx = t.make_context()
        assert torch.equal(t.predict(x, ctx), t.predict(x, ctx))

    def test_context_gets_gradient(self):
        t = orthogonal_teacher()
        ctx = t.make_context()
        t.predict(torch.randn(5, 4), ctx)[:, 0].sum().backward()
        assert ctx.context.grad is not None and ctx.context.grad.abs().sum() > 0

    def test_dimension_mismatch(self):
        t = orthogonal_teacher()
        ctx = PromptContext(["a", "b", "c"], torch.zeros(1, 7))
        with pytest.raises(ValueError):
            t.predict(torch.randn(2, 4), ctx)

    def test_omega_mixes_true_one_hot(self):
        labels = torch.tensor([0, 1, 2, 0])
        t = orthogonal_teacher(omega=0.6, labels=labels)
        pure = orthogonal_teacher()
        x = torch.randn(4, 4)
        ctx = t.make_context()
        mixed = t.predict(x, ctx, index=torch.arange(4))
        expected = 0.6 * pure.predict(x, ctx) + 0.4 * torch.nn.functional.one_hot(labels, 3)
        assert torch.allclose(mixed, expected)
        # without indices the teacher cannot look labels up
        assert torch.allclose(t.predict(x, ctx), pure.predict(x, ctx))

    def test_from_prototypes_seeded(self):
        protos = torch.tensor(SyntheticShiftSpec().class_means())
        a = MockTeacher.from_prototypes(protos, seed=2)
        b = MockTeacher.from_prototypes(protos, seed=2)
        assert a.frozen_hash() == b.frozen_hash()


# ---- CLIP adapter against a tiny random dual encoder ---------------------

VOCAB = ["<pad>", "<sos>", "<unused>", "<eos>", "a", "photo", "of", "cat", "dog", "bird", "."]


def toy_tokenize(texts, length):
    ids = []
    for text in texts:
        words = text.replace(".", " .").split()
        row = [1] + [VOCAB.index(w) for w in words] + [3]
        ids.append(row + [0] * (length - len(row)))
    return torch.tensor(ids)


@pytest.fixture(scope="module")
def tiny_clip():
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(0)
    cfg = transformers.CLIPConfig(
        text_config=dict(vocab_size=len(VOCAB), hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=16, bos_token_id=1,
                         eos_token_id=3, pad_token_id=0),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=4,
                           image_size=32, patch_size=16),
        projection_dim=16,
    )
    return transformers.CLIPModel(cfg).eval()


class TestClipTeacher:
    def test_zero_offset_reproduces_zero_shot(self, tiny_clip):
        names = ["cat", "dog", "bird"]
        t = ClipTeacher(tiny_clip, toy_tokenize, names, context_length=12)
        ctx = t.make_context()
        assert t.n_ctx == 4
        ours = t.text_features(ctx)
        with torch.no_grad():
            ref = tiny_clip.get_text_features(input_ids=toy_tokenize([f"a photo of a {n}." for n in names], 12))
        ref = ref if isinstance(ref, torch.Tensor) else ref.pooler_output
        assert torch.allclose(ours, ref, atol=1e-5)

    def test_predict_is_distribution_and_deterministic(self, tiny_clip):
        t = ClipTeacher(tiny_clip, toy_tokenize, ["cat", "dog"], context_length=12)
        x = torch.randn(3, 3, 32, 32, generator=torch.Generator().manual_seed(1))
        ctx = t.make_context(per_class=True)
        p = t.predict(x, ctx)
        assert p.shape == (3, 2) and torch.allclose(p.sum(1), torch.ones(3))
        assert torch.equal(p, t.predict(x, ctx))

    def test_only_context_trains(self, tiny_clip):
        t = ClipTeacher(tiny_clip, toy_tokenize, ["cat", "dog"], context_length=12)
        ctx = t.make_context()
        before = t.frozen_hash()
        opt = torch.optim.SGD([ctx.context], lr=0.5)
        loss = t.predict(torch.randn(2, 3, 32, 32), ctx)[:, 0].sum()
        loss.backward()
        opt.step()
        assert t.frozen_hash() == before
        assert all(not p.requires_grad for p in t.parameters())

    def test_unknown_class_name_fails_tokenization(self, tiny_clip):
        with pytest.raises(ValueError):
            ClipTeacher(tiny_clip, toy_tokenize, ["zebra"], context_length=12)

    def test_missing_model_is_unavailable(self, tmp_path):
        pytest.importorskip("transformers")
        with pytest.raises(TeacherUnavailable):
            ClipTeacher.from_pretrained(str(tmp_path / "absent"), ["cat"])
