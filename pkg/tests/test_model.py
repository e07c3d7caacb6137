import random
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

from dfcost.codec import TokenStream
from dfcost.ir import OpClass, RuntimeInput, SegmentMap, Span
from dfcost.model import (
    METRICS, STATIC_METRICS, Block, ModelConfig, SegmentMapMismatch, StructureChanged,
    _mix_batch, _mix_batch_dense, allowed_segments, batch_contexts, build_separation_mask,
    encode_workload, expected_parameter_count, forward, incremental_forward, init_model,
    local_encodings, make_batch, make_config, parameter_count,
)
from dfcost.synth import GenConfig, build_dataset

from helpers import chain, guarded_operator, vadd_operator, vadd_workload, with_input


def tiny(**kw):
    base = dict(embed_dim=32, heads=4, ff_dim=64, local_layers=2)
    base.update(kw)
    return make_config(**base)


@pytest.fixture(scope="module")
def model():
    return init_model(tiny(), seed=0)


@pytest.fixture(scope="module")
def corpus():
    return list(build_dataset(GenConfig(seed=5), 120))


def _params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_seeded_init():
    assert _params_equal(init_model(tiny(), 3), init_model(tiny(), 3))
    assert not _params_equal(init_model(tiny(), 3), init_model(tiny(), 4))


def test_parameter_count_formula():
    cfg = tiny()
    assert parameter_count(init_model(cfg)) == expected_parameter_count(cfg) == 139931
    for kw in ({"magnitude": False}, {"depth": False}, {"local_layers": 1, "ff_dim": 48}, {"isolate": False}):
        cfg = tiny(**kw)
        assert parameter_count(init_model(cfg)) == expected_parameter_count(cfg)


def test_vocab_must_cover_tokenizer():
    with pytest.raises(ValueError):
        init_model(ModelConfig(vocab_size=20))


def _copy_into_reference(blk: Block, d, heads, ff):
    ref = nn.TransformerEncoderLayer(d, heads, ff, dropout=0.0, activation="gelu",
                                     batch_first=True, norm_first=True)
    with torch.no_grad():
        ref.self_attn.in_proj_weight.copy_(blk.attn.in_proj.weight)
        ref.self_attn.in_proj_bias.copy_(blk.attn.in_proj.bias)
        ref.self_attn.out_proj.weight.copy_(blk.attn.out_proj.weight)
        ref.self_attn.out_proj.bias.copy_(blk.attn.out_proj.bias)
        for name in ("norm1", "norm2", "linear1", "linear2"):
            getattr(ref, name).load_state_dict(getattr(blk, name).state_dict())
    return ref.eval()


def test_block_matches_torch_encoder_layer():
    torch.manual_seed(0)
    blk = Block(32, 4, 64).eval()
    ref = _copy_into_reference(blk, 32, 4, 64)
    x = torch.randn(3, 11, 32)
    with torch.no_grad():
        torch.testing.assert_close(blk(x), ref(x), atol=1e-5, rtol=1e-5)


def test_single_segment_unmasked_equals_plain_transformer(model):
    # one segment and no masks: local stack then mixer is a plain layer stack
    w = vadd_workload()
    enc = encode_workload(w)
    span = enc.segmap.spans[1]
    ids = enc.stream.tokens[span.start:span.end]
    stream = TokenStream(ids, enc.stream.vocab_version, enc.stream.places[span.start:span.end],
                         enc.stream.numbers[span.start:span.end])
    segmap = SegmentMap((Span("OP0", 0, len(ids)),))
    out = forward(model, stream, segmap, None, decouple=False)
    cfg = model.cfg
    layers = [_copy_into_reference(b, cfg.embed_dim, cfg.heads, cfg.ff_dim) for b in model.local]
    mixer = _copy_into_reference(model.mixer, cfg.embed_dim, cfg.heads, cfg.ff_dim)
    with torch.no_grad():
        x = model.embed(torch.tensor(ids), torch.tensor(stream.places), torch.tensor(stream.numbers),
                        torch.full((len(ids),), 1)).unsqueeze(0)
        for layer in layers:
            x = layer(x)
        x = model.local_norm(x)
        torch.testing.assert_close(out.local[0], x[0], atol=1e-5, rtol=1e-5)
        y = model.mixer_norm(mixer(x))
    torch.testing.assert_close(out.mixed[0], y[0], atol=1e-5, rtol=1e-5)


def test_separation_mask_cases():
    w = with_input(chain(vadd_operator("fa"), guarded_operator("fb")), N=7)
    enc = encode_workload(w)
    labels = enc.segmap.labels()
    d = labels.index("DATA")
    assert enc.mask.blocked_pairs == {(1, d), (d, 1)}

    all_one = build_separation_mask(enc.segmap, [OpClass.I, OpClass.I])
    assert all_one.blocked_pairs == {(1, d), (d, 1), (2, d), (d, 2)}

    no_data = encode_workload(chain(vadd_operator("fa")))
    assert not no_data.mask.blocked_pairs
    with pytest.raises(SegmentMapMismatch):
        build_separation_mask(enc.segmap, [OpClass.I])


def test_dense_mask_covers_exact_spans():
    w = with_input(chain(vadd_operator("fa"), guarded_operator("fb")), N=7)
    enc = encode_workload(w)
    dense = enc.mask.dense()
    op0, data = enc.segmap.spans[1], enc.segmap.find("DATA")
    assert dense[op0.start:op0.end, data.start:data.end].all()
    assert dense.sum() == 2 * len(op0) * len(data)


def test_decoupled_operators_cannot_attend():
    w = with_input(chain(vadd_operator("fa"), guarded_operator("fb")), N=7)
    enc = encode_workload(w)
    allow = allowed_segments(enc.segmap, enc.mask)
    assert not allow[1, 2] and not allow[2, 1]
    assert allow[1, 1] and allow[2, 2] and allow[0, 1]


def test_static_outputs_ignore_data(model):
    w = chain(vadd_operator("fa", upper="N"), guarded_operator("fb"))
    a = forward(model, *_enc(with_input(w, N=7)))
    b = forward(model, *_enc(with_input(w, N=31)))
    no_data = forward(model, *_enc(replace(w, input=None)))
    for m in STATIC_METRICS:
        assert np.array_equal(a.distributions[m].probs, b.distributions[m].probs)
        assert np.array_equal(a.distributions[m].probs, no_data.distributions[m].probs)
        assert a.regression[m] == b.regression[m]
    assert not np.array_equal(a.distributions["cycles"].probs, b.distributions["cycles"].probs)


def test_class_one_rows_ignore_data(model):
    w = chain(vadd_operator("fa"), guarded_operator("fb"))
    a = forward(model, *_enc(with_input(w, N=12)))
    b = forward(model, *_enc(with_input(w, N=45)))
    # the Class I operator's global-layer rows never see DATA
    assert torch.equal(a.mixed[1], b.mixed[1])
    assert not torch.equal(a.mixed[2], b.mixed[2])


def _enc(w):
    e = encode_workload(w)
    return e.stream, e.segmap, e.mask


def test_segment_map_must_tile(model):
    stream, segmap, mask = _enc(vadd_workload())
    bad = SegmentMap(segmap.spans[:-1])
    with pytest.raises(SegmentMapMismatch):
        forward(model, stream, bad, None)


def test_incremental_no_change_reuses_everything(model):
    stream, segmap, mask = _enc(with_input(chain(vadd_operator("fa", upper="N")), N=9))
    full, cache, _ = incremental_forward(model, None, stream, segmap, mask)
    again, _, stats = incremental_forward(model, cache, stream, segmap, mask)
    assert stats.local_tokens == 0 and stats.score_blocks == 0
    for m in METRICS:
        assert np.array_equal(full.distributions[m].probs, again.distributions[m].probs)


def test_incremental_operator_edit_matches_full(model):
    base = with_input(chain(vadd_operator("fa"), guarded_operator("fb")), N=9)
    edited = replace(base, operators=(vadd_operator("fa", upper=12), base.operators[1]))
    _, cache, _ = incremental_forward(model, None, *_enc(base))
    inc, _, stats = incremental_forward(model, cache, *_enc(edited))
    full = forward(model, *_enc(edited))
    for x, y in zip(inc.mixed, full.mixed):
        assert (x - y).abs().max() <= 1e-5
    labels = _enc(edited)[1].labels()
    op0 = _enc(edited)[1].spans[1]
    assert stats.local_tokens == len(op0)
    # blocks touching OP0: its row and column among permitted pairs
    assert stats.score_blocks < stats.total_blocks
    assert labels[1] == "OP0"


def test_incremental_structure_change(model):
    _, cache, _ = incremental_forward(model, None, *_enc(chain(vadd_operator("fa"))))
    with pytest.raises(StructureChanged):
        incremental_forward(model, cache, *_enc(chain(vadd_operator("fa"), vadd_operator("fb"))))


def test_incremental_random_edits(model, corpus):
    rng = random.Random(0)
    for rec in corpus[:25]:
        w = rec.workload
        _, cache, _ = incremental_forward(model, None, *_enc(w))
        k = rng.randrange(len(w.operators))
        op = w.operators[k]
        new_op = replace(op, root=replace(op.root, step=op.root.step % 4 + 1))
        w2 = replace(w, operators=w.operators[:k] + (new_op,) + w.operators[k + 1:])
        inc, _, _ = incremental_forward(model, cache, *_enc(w2))
        full = forward(model, *_enc(w2))
        for m in METRICS:
            assert np.abs(inc.distributions[m].probs - full.distributions[m].probs).max() <= 1e-5


def test_batch_paths_agree(model, corpus):
    encs = [encode_workload(r.workload) for r in corpus[:12]]
    batch = make_batch(encs)
    with torch.no_grad():
        local = local_encodings(model, batch)
        unbucketed = model.encode_local(
            model.embed(batch.seg_ids, batch.seg_places, batch.seg_numbers, batch.seg_kinds), batch.seg_valid)
        valid = batch.seg_valid
        assert (local[valid] - unbucketed[valid]).abs().max() <= 1e-5
        fact = _mix_batch(model, batch, local)
        dense = _mix_batch_dense(model, batch, local)
        assert (fact[valid] - dense[valid]).abs().max() <= 1e-5
        ctx = batch_contexts(model, batch, local)
    for r, enc in enumerate(encs):
        out = forward(model, enc.stream, enc.segmap, enc.mask)
        for m in METRICS:
            assert (ctx[m][r] - out.contexts[m]).abs().max() <= 1e-5


def test_unmasked_config_lets_data_reach_everything():
    m = init_model(tiny(masked=False), 0)
    w = chain(vadd_operator("fa"), guarded_operator("fb"))
    a = forward(m, *_enc(with_input(w, N=12)))
    b = forward(m, *_enc(with_input(w, N=45)))
    assert not torch.equal(a.mixed[1], b.mixed[1])


def test_regression_in_unit_interval(model, corpus):
    for rec in corpus[:10]:
        out = forward(model, *_enc(rec.workload))
        assert all(0.0 < v < 1.0 for v in out.regression.values())


def test_empty_input_matches_missing_input(model):
    w = vadd_workload()
    a = forward(model, *_enc(replace(w, input=RuntimeInput())))
    b = forward(model, *_enc(w))
    for m in METRICS:
        assert np.array_equal(a.distributions[m].probs, b.distributions[m].probs)


def test_dropout_only_in_training_mode():
    m = init_model(tiny(dropout=0.3), 0)
    assert parameter_count(m) == expected_parameter_count(m.cfg)
    stream, segmap, mask = _enc(vadd_workload())
    a, b = forward(m, stream, segmap, mask), forward(m, stream, segmap, mask)
    assert torch.equal(a.mixed[1], b.mixed[1])
    m.train()
    with torch.no_grad():
        x = m.embed(torch.tensor(stream.tokens), torch.tensor(stream.places), torch.tensor(stream.numbers),
                    torch.ones(len(stream.tokens), dtype=torch.long))
        y = m.embed(torch.tensor(stream.tokens), torch.tensor(stream.places), torch.tensor(stream.numbers),
                    torch.ones(len(stream.tokens), dtype=torch.long))
    assert not torch.equal(x, y)
