import numpy as np
import pytest
import torch

from dfcost.ir import RuntimeInput
from dfcost.model import METRICS, init_model, make_config
from dfcost.synth import GenConfig, build_dataset
from dfcost.train import (
    EmptyDataset, TrainConfig, load_checkpoint, predict, predict_batch, prepare_examples,
    save_checkpoint, train_static,
)

from helpers import vadd_workload


def tiny_model(seed=0, **kw):
    return init_model(make_config(embed_dim=32, heads=4, ff_dim=64, local_layers=1, **kw), seed)


@pytest.fixture(scope="module")
def records():
    return list(build_dataset(GenConfig(seed=2, format="both"), 64))


@pytest.fixture(scope="module")
def trained(records):
    model = tiny_model()
    _, result = train_static(model, records, TrainConfig(epochs=6, lr=3e-3, warmup_steps=5))
    return model, result


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_static(tiny_model(), [], TrainConfig(epochs=1))


def test_zero_lr_leaves_parameters(records):
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("reg_")}
    train_static(model, records[:32], TrainConfig(epochs=1, lr=0.0, weight_decay=0.0))
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_loss_decreases(trained):
    _, result = trained
    assert len(result.epoch_losses) == 6
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_training_is_deterministic(records):
    a, b = tiny_model(), tiny_model()
    ra = train_static(a, records[:32], TrainConfig(epochs=1, warmup_steps=2))[1]
    rb = train_static(b, records[:32], TrainConfig(epochs=1, warmup_steps=2))[1]
    assert ra.epoch_losses == rb.epoch_losses
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_aux_loss_changes_dynamics_only(records):
    a, b = tiny_model(), tiny_model()
    train_static(a, records[:32], TrainConfig(epochs=1, aux_weight=0.0))
    train_static(b, records[:32], TrainConfig(epochs=1, aux_weight=0.25))
    pa, pb = predict(a, records[0].workload), predict(b, records[0].workload)
    assert pa.keys() == pb.keys()
    assert pa["power"].code.width == pb["power"].code.width


def test_predict_deterministic_and_samples(trained, records):
    model, _ = trained
    w = records[-1].workload
    p1, p2 = predict(model, w), predict(model, w)
    assert {m: p.value for m, p in p1.items()} == {m: p.value for m, p in p2.items()}
    s = predict(model, w, samples=5, seed=3)
    assert all(len(p.samples) == 5 for p in s.values())
    assert s["cycles"].samples == predict(model, w, samples=5, seed=3)["cycles"].samples
    assert s["cycles"].distribution is not None
    assert 0.0 < s["power"].confidence <= 1.0


def test_static_predictions_without_input(trained):
    model, _ = trained
    w = vadd_workload(upper="N")
    preds = predict(model, w)
    assert set(preds) == {"power", "area", "ff"}
    with_in = predict(model, w, input=RuntimeInput((("N", 9),)))
    assert set(with_in) == set(METRICS)
    assert preds["power"].value == with_in["power"].value


def test_beam_width_one_matches_greedy_distribution(trained, records):
    model, _ = trained
    p = predict(model, records[5].workload)
    digits = tuple(int(i) for i in np.argmax(p["cycles"].distribution.probs, axis=1))
    assert p["cycles"].code.digits == digits


def test_batch_prediction_matches_single(trained, records):
    model, _ = trained
    ex = prepare_examples(model, records[:10])
    out = predict_batch(model, ex)
    for k, rec in enumerate(records[:10]):
        single = predict(model, rec.workload)
        for m in METRICS:
            assert out[m]["value"][k] == single[m].value
            assert out[m]["confidence"][k] == pytest.approx(single[m].confidence, abs=1e-5)


def test_checkpoint_roundtrip(trained, records, tmp_path):
    model, _ = trained
    path = tmp_path / "m.pt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.cfg == model.cfg
    for rec in records[:5]:
        a, b = predict(model, rec.workload), predict(back, rec.workload)
        assert {m: p.value for m, p in a.items()} == {m: p.value for m, p in b.items()}


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_rename_augmentation_is_seeded(records):
    cfg = TrainConfig(epochs=1, warmup_steps=2, rename_prob=0.5)
    a, b = tiny_model(), tiny_model()
    ra = train_static(a, records[:32], cfg)[1]
    rb = train_static(b, records[:32], cfg)[1]
    assert ra.epoch_losses == rb.epoch_losses
    plain = train_static(tiny_model(), records[:32], TrainConfig(epochs=1, warmup_steps=2))[1]
    assert plain.epoch_losses != ra.epoch_losses
