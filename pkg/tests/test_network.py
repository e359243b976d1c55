import math
import zipfile

import pytest
import torch

from app.exceptions import ConfigError, ShapeError
from app.network import (Adapter, AttentionPool, ModelPair, SegNet, adapter_project, attention_pool,
                         checkpoint_bytes, ema_update, load_checkpoint, save_checkpoint)
from app.schemas import NetworkConfig


def test_segnet_shapes(tiny_network):
    logits, features = SegNet(tiny_network)(torch.rand(2, 3, 32, 32))
    assert logits.shape == (2, 6, 32, 32)
    assert features.shape == (2, 16, 8, 8)


def test_segnet_accepts_odd_sizes_and_single_images(tiny_network):
    logits, _ = SegNet(tiny_network)(torch.rand(3, 17, 23))
    assert logits.shape == (1, 6, 17, 23)


def test_segnet_rejects_wrong_channels(tiny_network):
    with pytest.raises(ShapeError):
        SegNet(tiny_network)(torch.rand(1, 4, 32, 32))


def test_zero_classifier_predicts_uniformly(tiny_network):
    net = SegNet(tiny_network)
    with torch.no_grad():
        net.classifier.weight.zero_()
        net.classifier.bias.zero_()
    probs = torch.softmax(net(torch.rand(1, 3, 32, 32))[0], dim=1)
    torch.testing.assert_close(probs, torch.full_like(probs, 1 / 6))


def _zero_positional(pool):
    with torch.no_grad():
        pool.positional.zero_()
    return pool


def test_attention_pool_single_token_returns_projected_value():
    torch.manual_seed(0)
    pool = AttentionPool(8, 2, 4).double()
    token = torch.randn(1, 8, 1, 1, dtype=torch.float64)
    expected = pool.out_proj(pool.v_proj(token.flatten(1) + pool.positional[0]))
    torch.testing.assert_close(pool(token), expected)


def test_attention_pool_of_constant_map_is_that_token_projected():
    torch.manual_seed(1)
    pool = _zero_positional(AttentionPool(8, 4, 16).double())
    token = torch.randn(8, dtype=torch.float64)
    features = token[None, :, None, None].expand(1, 8, 4, 4)
    torch.testing.assert_close(pool(features), pool.out_proj(pool.v_proj(token))[None])


def test_attention_pool_matches_per_head_loop():
    torch.manual_seed(2)
    pool = AttentionPool(6, 3, 9).double()
    features = torch.randn(2, 6, 3, 3, dtype=torch.float64)
    got = pool(features)
    head_dim = 2
    for b in range(2):
        tokens = features[b].flatten(1).T
        keyed = tokens + pool.positional
        query = pool.q_proj(tokens.mean(dim=0))
        keys, values = pool.k_proj(keyed), pool.v_proj(keyed)
        heads = []
        for h in range(3):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            scores = torch.stack([query[sl] @ keys[n, sl] for n in range(9)]) / math.sqrt(head_dim)
            weights = torch.exp(scores - scores.max())
            weights = weights / weights.sum()
            heads.append(sum(weights[n] * values[n, sl] for n in range(9)))
        torch.testing.assert_close(got[b], pool.out_proj(torch.cat(heads)))


def test_attention_pool_ignores_token_order_without_positions():
    torch.manual_seed(3)
    pool = AttentionPool(8, 2, 16).double()
    tokens = torch.randn(1, 10, 8, dtype=torch.float64)
    zeros = torch.zeros(10, 8, dtype=torch.float64)
    order = torch.randperm(10)
    torch.testing.assert_close(pool.pool_tokens(tokens, zeros), pool.pool_tokens(tokens[:, order], zeros))


def test_attention_pool_rejects_too_many_tokens():
    with pytest.raises(ShapeError):
        AttentionPool(4, 2, 8)(torch.rand(1, 4, 3, 3))
    with pytest.raises(ShapeError):
        AttentionPool(6, 4, 8)


def test_adapter_identity_configuration():
    adapter = Adapter(5, 5, activation=False).double()
    with torch.no_grad():
        for layer in (adapter.fc1, adapter.fc2):
            layer.weight.copy_(torch.eye(5))
            layer.bias.zero_()
    x = torch.randn(3, 5, dtype=torch.float64)
    torch.testing.assert_close(adapter(x), x)


def test_adapter_with_zero_weights_is_constant():
    adapter = Adapter(4, 6)
    with torch.no_grad():
        adapter.fc1.weight.zero_()
        adapter.fc2.weight.zero_()
    out = adapter(torch.randn(5, 4))
    torch.testing.assert_close(out, adapter.fc2.bias.detach().expand(5, 6))


def test_language_head_maps_features_to_text_space(tiny_network):
    pair = ModelPair(tiny_network)
    _, features = pair.student(torch.rand(2, 3, 32, 32))
    pooled = attention_pool(pair.head, features)
    assert pooled.shape == (2, 16)
    projected = adapter_project(pair.head, pooled)
    assert projected.shape == (2, tiny_network.embed_dim)
    torch.testing.assert_close(projected, pair.head(features))


def test_text_side_adapter_is_optional(tiny_network):
    vectors = torch.randn(2, 16, requires_grad=True)
    assert ModelPair(tiny_network).head.project_text(vectors).requires_grad is False
    with_text = ModelPair(tiny_network.model_copy(update={"adapter_on_text": True}))
    assert with_text.head.project_text(vectors).shape == (2, 16)


def _fill(module, value):
    with torch.no_grad():
        for p in module.parameters():
            p.fill_(value)


def test_ema_single_update(tiny_network):
    pair = ModelPair(tiny_network, dtype=torch.float64)
    _fill(pair.teacher, 1.0)
    _fill(pair.student, 0.0)
    ema_update(pair, 0.999)
    for p in pair.teacher.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 0.999))


def test_ema_with_zero_alpha_copies_the_student(tiny_network):
    pair = ModelPair(tiny_network)
    _fill(pair.teacher, 3.0)
    ema_update(pair, 0.0)
    for phi, theta in zip(pair.teacher.parameters(), pair.student.parameters()):
        torch.testing.assert_close(phi, theta)


def test_ema_stays_in_convex_hull_and_converges_geometrically(tiny_network):
    pair = ModelPair(tiny_network, dtype=torch.float64)
    teacher0 = [p.detach().clone() for p in pair.teacher.parameters()]
    with torch.no_grad():
        for p in pair.student.parameters():
            p.add_(torch.randn_like(p))
    student = [p.detach().clone() for p in pair.student.parameters()]
    for _ in range(100):
        ema_update(pair, 0.9)
    for phi, phi0, theta in zip(pair.teacher.parameters(), teacher0, student):
        assert (phi >= torch.minimum(phi0, theta) - 1e-12).all()
        assert (phi <= torch.maximum(phi0, theta) + 1e-12).all()
        torch.testing.assert_close(phi - theta, 0.9 ** 100 * (phi0 - theta), atol=1e-9, rtol=0)


def test_ema_with_unit_alpha_leaves_the_teacher_alone(tiny_network):
    pair = ModelPair(tiny_network, dtype=torch.float64)
    with torch.no_grad():
        for p in pair.student.parameters():
            p.add_(torch.randn_like(p))
    before = [p.detach().clone() for p in pair.teacher.parameters()]
    for _ in range(100):
        ema_update(pair, 1.0)
    for phi, phi0 in zip(pair.teacher.parameters(), before):
        assert torch.equal(phi, phi0)


def test_ema_rejects_alpha_outside_unit_interval(tiny_network):
    with pytest.raises(ConfigError):
        ema_update(ModelPair(tiny_network), 1.5)


def test_teacher_is_frozen(tiny_network):
    pair = ModelPair(tiny_network)
    assert not any(p.requires_grad for p in pair.teacher.parameters())
    assert not pair.teacher.training
    grouped = sum(len(g["params"]) for g in pair.parameter_groups(1e-3, 1e-2))
    assert grouped == len(list(pair.student.parameters())) + len(list(pair.head.parameters()))


def test_same_seed_gives_same_weights(tiny_network):
    assert checkpoint_bytes(ModelPair(tiny_network)) == checkpoint_bytes(ModelPair(tiny_network))
    other = ModelPair(tiny_network.model_copy(update={"seed": 1}))
    assert checkpoint_bytes(other) != checkpoint_bytes(ModelPair(tiny_network))


def test_checkpoint_round_trip(tiny_network, tmp_path):
    pair = ModelPair(tiny_network)
    ema_update(pair, 0.5)
    path = save_checkpoint(pair, tmp_path / "ckpt" / "final.zip", step=42)
    loaded, step = load_checkpoint(path)
    assert step == 42
    assert loaded.config == tiny_network
    original, restored = pair.named_tensors(), loaded.named_tensors()
    for name, tensor in original.items():
        assert torch.equal(tensor, restored[name])


def test_checkpoint_bytes_are_reproducible(tiny_network, tmp_path):
    first = save_checkpoint(ModelPair(tiny_network), tmp_path / "a.zip", step=3)
    second = save_checkpoint(ModelPair(tiny_network), tmp_path / "b.zip", step=3)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_rejects_other_architecture(tiny_network, tmp_path):
    path = save_checkpoint(ModelPair(tiny_network), tmp_path / "small.zip")
    bigger = NetworkConfig(**{**tiny_network.model_dump(), "widths": (8, 32)})
    save_checkpoint(ModelPair(bigger), tmp_path / "big.zip")
    with zipfile.ZipFile(tmp_path / "mixed.zip", "w") as out, zipfile.ZipFile(tmp_path / "big.zip") as big, \
            zipfile.ZipFile(path) as small:
        out.writestr("network_config.json", small.read("network_config.json"))
        for name in big.namelist():
            if name != "network_config.json":
                out.writestr(name, big.read(name))
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "mixed.zip")
