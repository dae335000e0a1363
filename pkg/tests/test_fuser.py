import math

import pytest
import torch

from avprompt.encoders import ConditioningSequence, PyramidFeatures
from avprompt.fuser import PromptBundle, scaled_dot_attention
from avprompt.losses import total_loss
from avprompt.model import set_trainable

from .conftest import make_clip


def rand_pyramid(B=2, L=32):
    return PyramidFeatures([torch.randn(B, 16, 16, L), torch.randn(B, 8, 8, L), torch.randn(B, 4, 4, L)])


def rand_cond(B=2, Nt=0, L=32):
    z_a = torch.randn(B, L)
    z_t = torch.randn(Nt, L) if Nt else None
    return ConditioningSequence(z_a, z_t, z_a if z_t is None else torch.cat([z_a, z_t]))


@pytest.mark.parametrize("k,size", [(1, 16), (2, 8), (3, 4)])
def test_patch_embed_shapes(model, k, size):
    out = model.fuser.patch_embed_level(torch.randn(2, size, size, 32), k)
    assert tuple(out.shape) == (2, 4, 4, 32)


def test_patch_embed_rejects_bad_size(model):
    with pytest.raises(ValueError):
        model.fuser.patch_embed_level(torch.randn(2, 6, 6, 32), 1)


def test_level3_is_pointwise(model):
    x = torch.randn(1, 4, 4, 32)
    y = model.fuser.patch_embed_level(x, 3)
    x2 = x.clone()
    x2[0, 0, 0] += 5.0
    y2 = model.fuser.patch_embed_level(x2, 3)
    changed = (y2 - y).abs().sum(-1)[0] > 0
    assert changed[0, 0] and changed.sum() == 1


def test_attend_and_fuse_shapes(model):
    r_c, r_v = model.fuser.attend_and_fuse_level(torch.randn(6, 32), torch.randn(2, 4, 4, 32), 1)
    assert tuple(r_c.shape) == (6, 32) and tuple(r_v.shape) == (2, 4, 4, 32)


def test_attend_rejects_width_mismatch(model):
    with pytest.raises(ValueError):
        model.fuser.attend_and_fuse_level(torch.randn(2, 16), torch.randn(2, 4, 4, 32), 1)


def test_attention_rows_sum_to_one():
    q, k = torch.randn(7, 5), torch.randn(3, 5)
    attn = torch.softmax(q @ k.T / math.sqrt(5), dim=-1)
    assert torch.allclose(attn.sum(-1), torch.ones(7))
    # identity values expose the attention matrix itself
    out = scaled_dot_attention(q, k, torch.eye(3))
    assert torch.allclose(out.sum(-1), torch.ones(7))


def test_constant_scores_average_values():
    # two tokens, identical keys: softmax([s, s]) = [1/2, 1/2]
    q = torch.tensor([[1.0, 2.0], [0.5, -1.0]])
    k = torch.tensor([[0.3, 0.3], [0.3, 0.3]])
    v = torch.tensor([[2.0, -4.0], [6.0, 8.0]])
    out = scaled_dot_attention(q, k, v)
    assert torch.allclose(out, torch.tensor([[4.0, 2.0], [4.0, 2.0]]))


def test_pyramid_smooth(model):
    z = torch.randn(2, 4, 4, 32)
    with pytest.raises(ValueError):
        model.fuser.pyramid_smooth(z, z, 1)
    a = model.fuser.pyramid_smooth(torch.zeros_like(z), z, 2)
    b = model.fuser.pyramid_smooth(None, z, 2)
    assert torch.equal(a, b) and a.shape == z.shape


def test_fuse_forward_levels(model):
    model.eval()
    b3 = model.fuser(rand_pyramid(), rand_cond(Nt=4))
    assert [tuple(s.shape) for s in b3.sparse] == [(2, 32)] * 3
    assert [tuple(d.shape) for d in b3.dense] == [(2, 4, 4, 32)] * 3
    assert b3.levels == (1, 2, 3)
    b1 = model.fuser(rand_pyramid(), rand_cond(), pyramid_levels=1)
    assert len(b1.sparse) == len(b1.dense) == 1 and b1.levels == (3,)


def test_fuse_forward_deterministic(model):
    model.eval()
    pyr, cond = rand_pyramid(), rand_cond(Nt=2)
    a, b = model.fuser(pyr, cond), model.fuser(pyr, cond)
    assert all(torch.equal(x, y) for x, y in zip(a.sparse + a.dense, b.sparse + b.dense))


def test_select_audio_rows(model):
    model.eval()
    cond = rand_cond(B=3, Nt=4)
    captured = []
    original = model.fuser.attend_and_fuse_level

    def spy(z_c, z_v, k):
        out = original(z_c, z_v, k)
        captured.append(out[0])
        return out

    model.fuser.attend_and_fuse_level = spy
    bundle = model.fuser(rand_pyramid(B=3), cond)
    assert len(captured) == 3
    for r_c, r_a in zip(captured, bundle.sparse):
        assert r_c.shape == (7, 32)
        assert torch.equal(r_c[:3], r_a)


def test_every_fuser_parameter_gets_gradient(model):
    set_trainable(model)
    model.train(True)
    for m in model.modules():
        if isinstance(m, torch.nn.Dropout):
            m.p = 0.0
    clip = make_clip(3, text=(5, 9, 11))
    loss, _ = total_loss(model, clip)
    loss.backward()
    dead = [n for n, p in model.fuser.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert not dead
    assert all(p.grad is not None for p in model.projectors.parameters())
    assert all(p.grad is not None for p in model.audio_encoder.parameters())


def test_bundle_validation():
    with pytest.raises(ValueError):
        PromptBundle([torch.zeros(2, 4)], [], (1,))
