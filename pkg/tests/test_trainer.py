import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sgad.checkpoint import load_state, save_checkpoint
from sgad.config import DatasetSpec, ExperimentConfig, LossConfig, NoiseSchedule, TrainConfig
from sgad.data import load_dataset
from sgad.errors import NumericError
from sgad.model import SGADModel
from sgad.trainer import (GradientLog, MetricsWriter, TrainState, block_grad_l1, evaluate, fit, header_record,
                          lr_schedule, train_step)


@pytest.fixture
def tiny_exp(small_cfg):
    return ExperimentConfig(
        network=small_cfg,
        train=TrainConfig(epochs=3, batch_size=16, decay_epochs=(2,), grad_log_start_epoch=1),
        noise=NoiseSchedule(0.0, 3.0, 2),
        data=DatasetSpec(n_train=64, n_test=32),
    )


@pytest.fixture
def tiny_data(tiny_exp):
    return load_dataset(tiny_exp.data, tiny_exp.network)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.1
    assert lr_schedule(127, cfg) == 0.1
    assert lr_schedule(128, cfg) == pytest.approx(0.01)
    assert lr_schedule(200, cfg) == pytest.approx(1e-4)


def test_gradient_log_running_mean():
    g = GradientLog(2)
    np.testing.assert_array_equal(g.mean(), [0.0, 0.0])
    g.add([1.0, 2.0])
    g.add([3.0, 4.0])
    np.testing.assert_array_equal(g.mean(), [2.0, 3.0])
    h = GradientLog(2)
    h.load_state_dict(g.state_dict())
    np.testing.assert_array_equal(h.mean(), g.mean())


def test_block_grad_l1_is_mean_abs(small_model):
    for i, blk in enumerate(small_model.backbone.blocks):
        for p in blk.parameters():
            p.grad = torch.full_like(p, float(i + 1)) * (-1) ** i
    assert block_grad_l1(small_model) == pytest.approx([1, 2, 3, 4, 5, 6])


def test_plain_step_equivalence(tiny_exp, tiny_data):
    """With only the classification term and an all-ones mask, a step is ordinary SGD on the backbone."""
    cfg = tiny_exp.replace(loss={"alpha_m": 0.0, "alpha_g": 0.0})
    state = TrainState.fresh(cfg)
    ref = copy.deepcopy(state.model.backbone).train()
    x, y = tiny_data[0].images[:16], tiny_data[0].labels[:16]
    ones = torch.ones(16, state.model.num_blocks)

    loss = F.cross_entropy(ref(x, ones).logits, y)
    grads = torch.autograd.grad(loss, list(ref.parameters()))
    rec = train_step(state, x, y, mask_override=ones)
    assert rec["losses"]["R_m"] == 0.0 and rec["losses"]["R_g"] == 0.0
    assert rec["losses"]["R_prime"] == pytest.approx(float(loss.detach()), rel=1e-6)
    for p, g, q in zip(ref.parameters(), grads, state.model.backbone.parameters()):
        torch.testing.assert_close(q.detach(), p.detach() - 0.1 * g, rtol=1e-5, atol=1e-7)


def test_never_kept_block_unchanged(tiny_exp, tiny_data):
    state = TrainState.fresh(tiny_exp)
    before = [p.detach().clone() for p in state.model.block_parameters(1)]
    x, y = tiny_data[0].images[:16], tiny_data[0].labels[:16]
    mask = torch.ones(16, state.model.num_blocks)
    mask[:, 1] = 0
    for _ in range(3):
        train_step(state, x, y, mask_override=mask)
    for b, p in zip(before, state.model.block_parameters(1)):
        assert torch.equal(b, p)
    assert any(not torch.equal(b, p) for b, p in
               zip(before, [q for q in state.model.block_parameters(0)]))


def test_zero_guideline_weight_leaves_sgnet_untouched(tiny_exp, tiny_data):
    cfg = tiny_exp.replace(loss={"alpha_g": 0.0})
    state = TrainState.fresh(cfg)
    before = copy.deepcopy(state.model.sgnet.state_dict())
    x, y = tiny_data[0].images[:16], tiny_data[0].labels[:16]
    rec = train_step(state, x, y)
    # the raw guideline loss is still logged, it just carries no weight
    losses = rec["losses"]
    assert losses["total"] == pytest.approx(losses["R_prime"] + losses["R_m"], rel=1e-6)
    for k, v in state.model.sgnet.state_dict().items():
        if "running" not in k and "num_batches" not in k:
            assert torch.equal(v, before[k]), k


def test_non_finite_loss_reports_position(tiny_exp, tiny_data):
    state = TrainState.fresh(tiny_exp)
    x = tiny_data[0].images[:16].clone()
    x[3] = float("nan")
    with pytest.raises(NumericError, match="batch 7"):
        train_step(state, x, tiny_data[0].labels[:16], batch_index=7)


def _run(cfg, data, path, until=None, state=None, append=False):
    state = state or TrainState.fresh(cfg)
    w = MetricsWriter(path, append=append)
    if not append:
        w.write(header_record(cfg))
    fit(state, data[0], data[1], w, until_epoch=until)
    w.close()
    return state


def test_training_is_deterministic(tmp_path, tiny_exp, tiny_data):
    a = _run(tiny_exp, tiny_data, tmp_path / "a.jsonl")
    b = _run(tiny_exp, tiny_data, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_resume_is_bit_exact(tmp_path, tiny_exp, tiny_data):
    full = _run(tiny_exp, tiny_data, tmp_path / "full.jsonl")
    part = _run(tiny_exp, tiny_data, tmp_path / "part.jsonl", until=2)
    save_checkpoint(tmp_path / "ck", part.model, tiny_exp, part)
    resumed = load_state(tmp_path / "ck")
    assert (resumed.epoch, resumed.step) == (2, part.step)
    _run(tiny_exp, tiny_data, tmp_path / "part.jsonl", state=resumed, append=True)
    assert (tmp_path / "full.jsonl").read_bytes() == (tmp_path / "part.jsonl").read_bytes()
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)
    np.testing.assert_array_equal(full.grad_log.mean(), resumed.grad_log.mean())


def test_grad_logging_starts_at_configured_epoch(tmp_path, tiny_exp, tiny_data):
    state = _run(tiny_exp, tiny_data, tmp_path / "m.jsonl")
    import json
    recs = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    steps = [r for r in recs if r["kind"] == "step"]
    assert all(("grad_l1" in r) == (r["epoch"] >= 1) for r in steps)
    assert state.grad_log.count == sum("grad_l1" in r for r in steps)
    epochs = [r for r in recs if r["kind"] == "epoch"]
    assert [r["lr"] for r in epochs] == pytest.approx([0.1, 0.1, 0.01])


def test_evaluate_deterministic_and_unmasked_flops(tiny_exp, tiny_data):
    model = SGADModel.build(tiny_exp.network)
    a, b = evaluate(model, tiny_data[1]), evaluate(model, tiny_data[1])
    assert a.accuracy == b.accuracy and np.array_equal(a.bits, b.bits)
    with torch.no_grad():
        model.bmnet.fc.bias.fill_(1e4)
        model.bmnet.fc.weight.zero_()
    ev = evaluate(model, tiny_data[1], include_bmnet=False)
    assert ev.flops.n_flops == pytest.approx(1.0, abs=1e-15)
    assert np.all(ev.executed_blocks == model.num_blocks)
