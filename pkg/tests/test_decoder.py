"""State encoder and diffusion action decoder: graph-biased attention,
coarse-to-fine upsampling, and the zero-initialized head."""

import numpy as np
import pytest
import torch

from mvpolicy.config import RunConfig
from mvpolicy.decoder import (
    ActionDecoder,
    GraphBias,
    StateEncoder,
    UpsampleHead,
    _stages,
    hop_buckets,
)
from mvpolicy.kinematics import dual_arm_chain, link_hop_distances
from mvpolicy.numcore import Rng, init_parameters

CFG = RunConfig.tiny()
CHAIN = dual_arm_chain()
NJ = CHAIN.n_joints
DIM = CFG.encoder.token_dim
HOP = hop_buckets(link_hop_distances(CHAIN), CFG.decoder.graph_bias_buckets)


def test_hop_buckets_clip_at_last_bucket():
    graph = link_hop_distances(CHAIN)
    assert graph.max() == 14
    b = hop_buckets(graph, 9)
    assert b.dtype == torch.int64
    assert int(b.max()) == 8            # far pairs share the last bucket
    assert int(b[0, 6]) == 6            # within-range hops keep their count
    assert int(b[6, 13]) == 8
    assert torch.equal(b, b.t())


def test_graph_bias_lookup_and_gradient():
    gb = GraphBias(4)
    with torch.no_grad():
        gb.bias.copy_(torch.tensor([0.0, 1.0, 2.0, 3.0]))
    hop = torch.tensor([[0, 1], [1, 3]])
    out = gb(hop)
    assert torch.equal(out, torch.tensor([[0.0, 1.0], [1.0, 3.0]]))
    out.sum().backward()
    # bucket 2 is unused in this hop table, buckets 0 and 3 used once, 1 twice
    assert gb.bias.grad.tolist() == [1.0, 2.0, 0.0, 1.0]


def test_state_encoder_shapes_and_weights():
    enc = StateEncoder(DIM, heads=4, buckets=9, blocks=2)
    init_parameters(enc, Rng(0))
    state = Rng(1).torch_normal((3, NJ, 8))
    tokens = enc(state, HOP)
    assert tokens.shape == (3, NJ, DIM)
    tokens2, weights = enc(state, HOP, return_weights=True)
    assert torch.equal(tokens, tokens2)
    assert len(weights) == 2
    assert weights[0].shape == (3, 4, NJ, NJ)
    assert torch.allclose(weights[0].sum(-1), torch.ones(3, 4, NJ), atol=1e-6)


def test_state_encoder_graph_bias_steers_attention():
    enc = StateEncoder(DIM, heads=4, buckets=9, blocks=1)
    init_parameters(enc, Rng(2))
    state = Rng(3).torch_normal((1, NJ, 8))
    _, w_flat = enc(state, HOP, return_weights=True)
    with torch.no_grad():
        enc.graph_bias[0].bias[0] = 8.0  # strongly favor self (hop 0)
    _, w_self = enc(state, HOP, return_weights=True)
    assert not torch.allclose(w_flat[0], w_self[0], atol=1e-4)
    diag_flat = torch.diagonal(w_flat[0].mean(0), dim1=-2, dim2=-1).mean()
    diag_self = torch.diagonal(w_self[0].mean(0), dim1=-2, dim2=-1).mean()
    assert float(diag_self.detach()) > float(diag_flat.detach())


def test_upsample_head_doubles_to_horizon():
    head = UpsampleHead(DIM, stages=3)
    init_parameters(head, Rng(4))
    x = Rng(5).torch_normal((2, 8, NJ, DIM))
    out, stages = head(x, collect_stages=True)
    assert stages == [16, 32, 64]       # 8 -> 16 -> 32 -> 64 coarse-to-fine
    assert out.shape == (2, 64, NJ, 8)


def test_upsample_head_zero_initialized():
    head = UpsampleHead(DIM, stages=3)
    init_parameters(head, Rng(6))       # re-init must keep the zero head
    x = Rng(7).torch_normal((1, 8, NJ, DIM))
    assert torch.all(head(x) == 0.0)
    assert torch.all(head.convs[-1].weight == 0.0)


def test_stages_requires_power_of_two():
    assert _stages(8) == 3
    assert _stages(1) == 0
    with pytest.raises(ValueError, match="power of two"):
        _stages(6)


def _decoder(context=True):
    dec = ActionDecoder(CFG.decoder, DIM, context=context)
    init_parameters(dec, Rng(8))
    return dec


def _decoder_inputs(rng, batch=2, with_context=True):
    dcfg = CFG.decoder
    ng, ls = 12, 6
    return {
        "noisy": rng.torch_normal((batch, dcfg.horizon, NJ, 8)),
        "t": torch.tensor([500] * batch),
        "state_tokens": rng.torch_normal((batch, NJ, DIM)),
        "hop": HOP,
        "geom_tokens": rng.torch_normal((batch, ng, DIM)),
        "geom_anchors": rng.torch_normal((batch, ng, 3)) * 0.3,
        "geom_pos": torch.arange(ng) % 4,
        "context": rng.torch_normal((batch, ls, DIM)) if with_context else None,
    }


def test_decoder_output_zero_at_init():
    # the zero-initialized head makes the first prediction independent of
    # everything; training starts from an exact blank slate
    dec = _decoder()
    out = dec(**_decoder_inputs(Rng(9)))
    assert out.shape == (2, CFG.decoder.horizon, NJ, 8)
    assert torch.all(out == 0.0)


def _open_head(dec, seed):
    with torch.no_grad():
        last = dec.head.convs[-1]
        last.weight.add_(0.05 * Rng(seed).torch_normal(tuple(last.weight.shape)))


def test_decoder_conditions_on_everything_once_head_opens():
    dec = _decoder()
    _open_head(dec, 10)
    base = _decoder_inputs(Rng(11))
    out = dec(**base)
    assert not torch.all(out == 0.0)

    # random perturbations: constant shifts would be nulled by the LayerNorm
    # that normalizes cross-attention keys
    for i, key in enumerate(["noisy", "state_tokens", "geom_tokens", "context"]):
        alt = dict(base)
        alt[key] = base[key] + 0.5 * Rng(20 + i).torch_normal(tuple(base[key].shape))
        assert not torch.allclose(dec(**alt), out, atol=1e-6), key
    alt = dict(base)
    alt["t"] = torch.tensor([900, 900])
    assert not torch.allclose(dec(**alt), out, atol=1e-6)
    alt = dict(base)
    alt["geom_anchors"] = base["geom_anchors"] + 0.2
    assert not torch.allclose(dec(**alt), out, atol=1e-6)


def test_decoder_without_context_stream():
    dec = _decoder(context=False)
    _open_head(dec, 12)
    inputs = _decoder_inputs(Rng(13), with_context=False)
    out = dec(**inputs)
    assert out.shape == (2, CFG.decoder.horizon, NJ, 8)
    assert dec.blocks[0].ctx_attn is None


def test_decoder_rejects_wrong_horizon():
    dec = _decoder()
    bad = _decoder_inputs(Rng(14))
    bad["noisy"] = bad["noisy"][:, :-1]
    with pytest.raises(ValueError, match="horizon"):
        dec(**bad)


def test_decoder_batch_consistency():
    dec = _decoder()
    _open_head(dec, 15)
    inputs = _decoder_inputs(Rng(16), batch=2)
    out = dec(**inputs)
    solo = dec(**{k: (v[:1] if isinstance(v, torch.Tensor)
                      and k not in ("hop", "geom_pos") else v)
                  for k, v in inputs.items()})
    assert torch.allclose(out[:1], solo, atol=1e-5)
