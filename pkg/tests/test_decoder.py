import pytest
import torch

from avprompt.decoder import (
    BOX_CORNER_A,
    POINT_POSITIVE,
    PROMPT_PAD,
    DecoderOutputs,
    select_mask,
)
from avprompt.fuser import PromptBundle


def rand_inputs(B=2, L=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    image = torch.randn(B, 4, 4, L, generator=g)
    high = [torch.randn(B, 16, 16, L, generator=g), torch.randn(B, 8, 8, L, generator=g)]
    return image, high


def rand_bundle(B=2, L=32, levels=(1, 2, 3), seed=1):
    g = torch.Generator().manual_seed(seed)
    return PromptBundle(
        [torch.randn(B, L, generator=g) for _ in levels],
        [torch.randn(B, 4, 4, L, generator=g) for _ in levels],
        tuple(levels),
    )


def test_output_shapes(model):
    image, high = rand_inputs()
    out = model.decoder(image, high)
    assert tuple(out.mask_logits.shape) == (2, 3, 64, 64)
    assert tuple(out.iou_pred.shape) == (2, 3)
    assert tuple(out.obj_logit.shape) == (2,)
    assert ((out.iou_pred >= 0) & (out.iou_pred <= 1)).all()


def test_zero_bundle_is_bit_identical(model):
    image, high = rand_inputs()
    base = model.decoder(image, high)
    out = model.decoder(image, high, rand_bundle().zeros_like())
    assert torch.equal(base.mask_logits, out.mask_logits)
    assert torch.equal(base.iou_pred, out.iou_pred)
    assert torch.equal(base.obj_logit, out.obj_logit)


def test_nonzero_bundle_changes_output(model):
    image, high = rand_inputs()
    base = model.decoder(image, high)
    out = model.decoder(image, high, rand_bundle())
    assert not torch.allclose(base.mask_logits, out.mask_logits)


def test_sparse_and_dense_removal_combine_to_zero(model):
    image, high = rand_inputs()
    bundle = rand_bundle().without_sparse().without_dense()
    assert torch.equal(model.decoder(image, high).mask_logits, model.decoder(image, high, bundle).mask_logits)


def test_injection_locality_level3_only(model):
    image, high = rand_inputs()
    plain, injected = [], []
    model.decoder(image, high, trace=plain)
    model.decoder(image, high, rand_bundle(levels=(3,)), trace=injected)
    for k in (0, 1):
        assert torch.equal(plain[k][0], injected[k][0])
        assert torch.equal(plain[k][1], injected[k][1])
    assert not torch.equal(plain[2][0], injected[2][0])
    assert not torch.equal(plain[2][1], injected[2][1])


def test_sparse_prompt_reaches_mask_tokens_only(model):
    image, high = rand_inputs()
    bundle = rand_bundle(levels=(1,))
    trace = []
    model.decoder(image, high, bundle.without_dense(), trace=trace)
    q = trace[0][0]
    base = model.decoder.output_tokens.weight
    assert torch.allclose(q[:, :3], base[None, :3] + bundle.sparse[0][:, None])
    assert torch.equal(q[:, 3:], base[None, 3:].expand(2, -1, -1))


def test_bundle_shape_mismatch_raises(model):
    image, high = rand_inputs()
    bad = PromptBundle([torch.zeros(2, 32)], [torch.zeros(2, 8, 8, 32)], (1,))
    with pytest.raises(ValueError):
        model.decoder(image, high, bad)


def test_visual_prompts_are_concatenated(model):
    image, high = rand_inputs(B=1)
    coords = torch.tensor([[[10, 20], [5, 5], [30, 40]]])
    types = torch.tensor([[POINT_POSITIVE, BOX_CORNER_A, PROMPT_PAD]])
    tokens = model.decoder.prompt_embedder(coords, types)
    trace = []
    out = model.decoder(image, high, prompt_tokens=tokens, trace=trace)
    assert trace[0][0].shape[1] == 5 + 3
    assert not torch.allclose(out.mask_logits, model.decoder(image, high).mask_logits)


def test_pad_prompt_embedding_ignores_coordinates(model):
    emb = model.decoder.prompt_embedder
    a = emb(torch.tensor([[[1, 2]]]), torch.tensor([[PROMPT_PAD]]))
    b = emb(torch.tensor([[[40, 50]]]), torch.tensor([[PROMPT_PAD]]))
    assert torch.equal(a, b)


def _outputs(masks, iou):
    masks = torch.as_tensor(masks, dtype=torch.float32)
    return DecoderOutputs(masks, torch.as_tensor(iou, dtype=torch.float32), torch.zeros(masks.shape[0]))


def test_select_training_exact_candidate():
    gt = torch.zeros(1, 8, 8)
    gt[0, :4] = 1
    exact = (gt * 40 - 20)[0]
    disjoint = ((1 - gt) * 40 - 20)[0]
    out = _outputs(torch.stack([disjoint, exact, disjoint])[None], [[0.9, 0.1, 0.9]])
    assert select_mask(out, "training", gt).tolist() == [1]


def test_select_inference_tie_break():
    out = _outputs(torch.zeros(1, 3, 4, 4), [[0.2, 0.9, 0.9]])
    assert select_mask(out, "inference").tolist() == [1]


def test_identical_candidates_pick_zero():
    out = _outputs(torch.ones(2, 3, 4, 4), [[0.5, 0.5, 0.5]] * 2)
    gt = torch.ones(2, 4, 4)
    assert select_mask(out, "inference").tolist() == [0, 0]
    assert select_mask(out, "training", gt).tolist() == [0, 0]


def test_select_errors():
    out = _outputs(torch.zeros(1, 3, 4, 4), [[0.1, 0.2, 0.3]])
    with pytest.raises(ValueError):
        select_mask(out, "training")
    with pytest.raises(ValueError):
        select_mask(out, "bogus")
