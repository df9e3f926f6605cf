import numpy as np
import pytest
import torch

from synthct.losses import LossWeights, perceptual_loss
from synthct.phantom import PhantomSpec, generate_phantom
from synthct.preprocess import NormalizationSpec, normalize_ct, normalize_mri, stack_slices
from synthct.trainer import (
    Checkpoint,
    CheckpointError,
    ModelConfig,
    TrainConfig,
    UnpairedSampler,
    generator_objective,
    new_train_state,
    train,
    train_step,
    translate_volume,
)


def tiny(steps=3, **kw):
    model = dict(base_width=8, levels=2, critic_widths=(8, 16, 16, 16))
    model.update(kw.pop("model", {}))
    kw.setdefault("resolution", (32, 32))
    return TrainConfig(model=ModelConfig(**model), steps=steps, **kw)


@pytest.fixture(scope="module")
def pools():
    ph = [generate_phantom(PhantomSpec(n_slices=4, height=32, width=32, seed=s)) for s in range(3)]
    mri = stack_slices([s for p in ph for s in normalize_mri(p.mri)])
    ct = stack_slices([s for p in ph for s in normalize_ct(p.ct)])
    return mri, ct


def params(state):
    return [p.detach().clone() for net in state.networks().values() for p in net.parameters()]


def test_zero_learning_rate_is_identity(pools):
    mri, ct = pools
    cfg = tiny(learning_rate=0.0)
    state = new_train_state(cfg)
    before = params(state)
    _, b1 = train_step(state, mri[:4], ct[4:8], cfg)
    _, b2 = train_step(state, mri[:4], ct[4:8], cfg)
    assert all(torch.equal(a, b) for a, b in zip(before, params(state)))
    assert b1 == b2
    assert state.step == 2


def test_critic_clipping_after_every_step(pools):
    mri, ct = pools
    cfg = tiny(learning_rate=1e-2, clip=0.01)
    state = new_train_state(cfg)
    for i in range(3):
        train_step(state, mri[i:i + 4], ct[i + 1:i + 5], cfg)
        assert all(p.abs().max().item() <= 0.01 for p in state.critic_parameters())


def test_history_finite_and_step_monotone(pools):
    ck, hist = train(tiny(steps=4), *pools)
    assert len(hist) == 4 and ck.step == 4
    assert all(np.isfinite([h.adv_g, h.adv_d, h.cycle, h.perceptual, h.total_g]).all() for h in hist)


def test_vgg_off_has_zero_perceptual(pools):
    _, hist = train(tiny(steps=2, model=dict(use_vgg=False)), *pools)
    assert all(h.perceptual == 0.0 for h in hist)


@pytest.mark.parametrize("use_cc, channels", [(False, 3), (True, 5)])
def test_cc_input_channels(use_cc, channels):
    state = new_train_state(tiny(model=dict(use_cc=use_cc)))
    assert state.g_mri2ct.down[0].in_channels == channels
    assert state.g_ct2mri.down[0].in_channels == channels


def test_generator_objective_perceptual_term(pools):
    mri, ct = pools
    cfg = tiny()
    state = new_train_state(cfg)
    x, y = torch.from_numpy(mri[:2]), torch.from_numpy(ct[:2])
    with torch.no_grad():
        _, parts = generator_objective(state, x, y, LossWeights(10, 1))
        rec_mri = state.g_ct2mri(state.g_mri2ct(x))
        rec_ct = state.g_mri2ct(state.g_ct2mri(y))
        expected = perceptual_loss(state.extractor, x, rec_mri) + perceptual_loss(state.extractor, y, rec_ct)
    assert float(parts["perceptual"]) == pytest.approx(float(expected), rel=1e-5)


@pytest.mark.parametrize("steps, every", [(5, 2), (4, 2), (3, 10)])
def test_checkpoint_count(pools, tmp_path, steps, every):
    train(tiny(steps=steps, checkpoint_every=every), *pools, checkpoint_dir=tmp_path)
    assert len(list(tmp_path.glob("*.dct"))) == steps // every + 1
    assert (tmp_path / "final.dct").exists()


def test_training_deterministic(pools):
    a, ha = train(tiny(steps=3), *pools)
    b, hb = train(tiny(steps=3), *pools)
    assert a.to_bytes() == b.to_bytes()
    assert ha == hb
    c, _ = train(tiny(steps=3, seed=1), *pools)
    assert c.to_bytes() != a.to_bytes()


def test_checkpoint_round_trip(pools, tmp_path):
    ck, _ = train(tiny(steps=2), *pools, norm=NormalizationSpec(ct_clip=(-900, 1500)))
    data = ck.to_bytes()
    assert data[:4] == b"DCT1"
    back = Checkpoint.load(ck.save(tmp_path / "c.dct"))
    assert back.to_bytes() == data
    assert back.config == ck.config and back.normalization == ck.normalization
    assert any(k.startswith("opt_g.") for k in back.tensors)


def test_checkpoint_rejects_bad_input(pools):
    ck, _ = train(tiny(steps=1), *pools)
    data = ck.to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(data[:-4])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(data + b"\0")
    newer = data.replace(b'"version": 1', b'"version": 9', 1)
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(newer)


def test_translate_volume_contract(pools):
    ck, _ = train(tiny(steps=2), *pools)
    mri = generate_phantom(PhantomSpec(n_slices=3, height=40, width=24, seed=9)).mri
    a = translate_volume(ck, mri)
    b = translate_volume(ck, mri)
    assert a.shape == mri.shape and a.modality == "CT"
    assert a.voxels.min() >= -1000 and a.voxels.max() <= 2000
    assert a == b


def test_translate_volume_rejects_ct(pools):
    ck, _ = train(tiny(steps=1), *pools)
    with pytest.raises(ValueError):
        translate_volume(ck, generate_phantom(PhantomSpec(n_slices=1)).ct)


def test_train_resolution_mismatch(pools):
    mri, ct = pools
    with pytest.raises(ValueError, match="resolution"):
        train(tiny(resolution=(64, 64)), mri, ct)


def test_train_empty_pool(pools):
    with pytest.raises(ValueError):
        train(tiny(), np.zeros((0, 3, 32, 32), np.float32), pools[1])


def test_sampler_unpaired_and_covering():
    s = UnpairedSampler(6, 10, 2, seed=0)
    seen_mri, seen_ct = [], []
    for _ in range(15):
        m, c = s.next()
        seen_mri += m
        seen_ct += c
    assert sorted(seen_mri[:6]) == list(range(6))
    assert sorted(seen_ct[:10]) == list(range(10))
    assert seen_mri[:10] != seen_ct[:10]


def test_config_dict_round_trip():
    cfg = tiny(steps=7, model=dict(use_cc=False, weights=LossWeights(3, 0.5)))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [dict(steps=0), dict(clip=0.0), dict(batch_size=0),
                                dict(resolution=(30, 32)), dict(lr_decay_start=3),
                                dict(lr_decay_start=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_learning_rate_schedule():
    assert [tiny(steps=4, learning_rate=1.0).learning_rate_at(i) for i in range(4)] == [1.0] * 4
    cfg = tiny(steps=10, learning_rate=1.0, lr_decay_start=6)
    # linear from the full rate at step 6 down to 1/4 at the last step
    assert [cfg.learning_rate_at(i) for i in (0, 5, 6, 7, 8, 9)] == [1.0, 1.0, 1.0, 0.75, 0.5, 0.25]


def test_learning_rate_applied_to_optimizers(pools):
    mri, ct = pools
    cfg = tiny(steps=4, learning_rate=1e-3, lr_decay_start=2)
    state = new_train_state(cfg)
    seen = []
    for i in range(4):
        train_step(state, mri[:4], ct[:4], cfg)
        seen.append({g["lr"] for opt in (state.opt_g, state.opt_d) for g in opt.param_groups})
    assert seen == [{1e-3}, {1e-3}, {1e-3}, {5e-4}]
