import numpy as np
import pytest
import torch

from stgan.data import Dataset, SplitSpec, stratified_split, synthetic_blobs
from stgan.gan import (
    DivergedTrainingError,
    EmptyBatchError,
    GanBackend,
    GanConfig,
    TrainedGan,
    generate,
    train,
)

TINY = GanConfig(
    num_classes=2,
    latent_dim=8,
    epochs=2,
    batch_size=16,
    architecture_scale="small",
    seed=7,
)


@pytest.fixture(scope="module")
def blob_split():
    ds = synthetic_blobs(120, K=2, separation=6.0, seed=3)
    lab, unlab = stratified_split(ds, SplitSpec(count_per_class=10, seed=1))
    return ds, lab, unlab


@pytest.fixture(scope="module")
def tiny_model(blob_split):
    _, lab, unlab = blob_split
    return train(lab, unlab, TINY)


def state_vec(model):
    return torch.cat(
        [p.reshape(-1) for p in model.discriminator.state_dict().values()]
        + [p.reshape(-1) for p in model.generator.state_dict().values()]
    )


class TestTrain:
    def test_deterministic_per_seed(self, blob_split):
        _, lab, unlab = blob_split
        m1 = train(lab, unlab, TINY)
        m2 = train(lab, unlab, TINY)
        assert torch.equal(state_vec(m1), state_vec(m2))
        assert m1.training_history == m2.training_history

    def test_history_length_matches_epochs(self, blob_split):
        _, lab, unlab = blob_split
        model = train(lab, unlab, GanConfig(**{**TINY.__dict__, "epochs": 1}))
        assert len(model.training_history) == 1
        model3 = train(lab, unlab, GanConfig(**{**TINY.__dict__, "epochs": 3}))
        assert len(model3.training_history) == 3

    def test_learns_separable_blobs(self, blob_split):
        ds, lab, unlab = blob_split
        cfg = GanConfig(num_classes=2, latent_dim=8, epochs=12, batch_size=16,
                        learning_rate=1e-3, seed=5)
        model = train(lab, unlab, cfg)
        test = Dataset(images=unlab.images, ids=unlab.ids, num_classes=2,
                       labels=unlab.shadow_labels)
        assert model.evaluate_error(test) < 0.05

    def test_empty_labelled_rejected(self, blob_split):
        ds, lab, unlab = blob_split
        empty = lab.subset(np.array([], dtype=int))
        with pytest.raises(EmptyBatchError):
            train(empty, unlab, TINY)

    def test_divergence_raises_with_epoch(self, blob_split):
        _, lab, unlab = blob_split
        boom = GanConfig(**{**TINY.__dict__, "learning_rate": 1e20, "epochs": 3})
        with pytest.raises(DivergedTrainingError) as err:
            train(lab, unlab, boom)
        assert err.value.epoch in (0, 1, 2)

    def test_losses_stay_finite_with_floor(self, blob_split):
        # log flooring keeps the discriminator terms finite from the first
        # epoch on, whatever the (sane) parameter magnitudes do
        _, lab, unlab = blob_split
        model = train(lab, unlab, TINY)
        for epoch in model.training_history:
            assert all(np.isfinite(v) for v in epoch.values())


class TestPredict:
    def test_rows_normalized(self, blob_split):
        _, lab, unlab = blob_split
        model = train(lab, unlab, TINY)
        probs = model.predict(unlab.images[:32])
        assert probs.shape == (32, 2)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        out = model.predict_output(unlab.images[:8])
        assert np.allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)

    def test_empty_input(self, blob_split):
        _, lab, unlab = blob_split
        model = train(lab, unlab, TINY)
        assert model.predict(np.zeros((0, 8, 8))).shape == (0, 2)


class TestGenerate:
    def test_zero_samples(self, tiny_model):
        out = generate(tiny_model, 0, seed=1)
        assert len(out) == 0

    def test_deterministic(self, tiny_model):
        a = generate(tiny_model, 20, seed=9)
        b = generate(tiny_model, 20, seed=9)
        assert np.array_equal(a.images, b.images)

    def test_range_and_tags(self, tiny_model):
        out = generate(tiny_model, 1000, seed=2)
        assert out.images.min() >= -1.0 and out.images.max() <= 1.0
        assert out.source == "generated"
        assert out.labels is None
        assert list(out.ids) == list(range(1000))


class TestEvaluateError:
    def test_endpoints(self, blob_split):
        _, lab, unlab = blob_split
        model = train(lab, unlab, TINY)
        images = unlab.images[:10]
        pred = model.predict(images).argmax(axis=1)
        all_right = Dataset(images=images, ids=np.arange(10), num_classes=2,
                            labels=pred)
        assert model.evaluate_error(all_right) == 0.0
        half = pred.copy()
        half[:5] = 1 - half[:5]
        half_wrong = Dataset(images=images, ids=np.arange(10), num_classes=2,
                             labels=half)
        assert model.evaluate_error(half_wrong) == 0.5
        with pytest.raises(EmptyBatchError):
            model.evaluate_error(all_right.subset(np.array([], dtype=int)))


class TestArchitectures:
    def test_paper_scale_shapes(self):
        import torch as t

        from stgan.gan import Discriminator, Generator

        disc = Discriminator(32, 10, scale="paper")
        gen = Generator(32, 64, scale="paper")
        x = t.zeros(2, 1, 32, 32)
        assert disc(x).shape == (2, 11)
        assert gen(t.zeros(2, 64)).shape == (2, 1, 32, 32)
        for layer in range(disc.num_hidden):
            assert disc.features(x, layer).ndim == 2

    def test_image_size_must_be_divisible(self):
        from stgan.gan import Discriminator

        with pytest.raises(ValueError):
            Discriminator(30, 10)


class TestModelLossSurface:
    def test_loss_values_on_batches(self, tiny_model, blob_split):
        _, lab, unlab = blob_split
        sup = tiny_model.supervised_loss(lab.images, lab.labels)
        assert sup >= 0.0 and np.isfinite(sup)
        gen_imgs = generate(tiny_model, 8, seed=1).images
        unsup = tiny_model.unsupervised_loss(unlab.images[:8], gen_imgs)
        assert unsup >= 0.0 and np.isfinite(unsup)
        noise = np.random.default_rng(0).normal(size=(8, TINY.latent_dim))
        fm = tiny_model.feature_matching_loss(unlab.images[:8], noise)
        assert fm >= 0.0 and np.isfinite(fm)


class TestCheckpoint:
    def test_round_trip(self, blob_split, tmp_path):
        _, lab, unlab = blob_split
        model = train(lab, unlab, TINY)
        path = tmp_path / "gan.pt"
        model.save(path)
        back = TrainedGan.load(path)
        x = unlab.images[:16]
        assert np.array_equal(model.predict(x), back.predict(x))
        assert back.config == model.config
        assert back.training_history == model.training_history


class TestGanBackend:
    def test_protocol_surface(self, blob_split):
        _, lab, unlab = blob_split
        backend = GanBackend(TINY)
        model = backend.train_on(lab, unlab, seed=11)
        probs = backend.predict_proba(model, unlab.images[:4])
        assert probs.shape == (4, 2)
        gen = backend.generate(model, 5, seed=3)
        assert len(gen) == 5 and gen.source == "generated"

    def test_seed_controls_training(self, blob_split):
        _, lab, unlab = blob_split
        backend = GanBackend(TINY)
        m1 = backend.train_on(lab, unlab, seed=1)
        m2 = backend.train_on(lab, unlab, seed=1)
        m3 = backend.train_on(lab, unlab, seed=2)
        assert torch.equal(state_vec(m1), state_vec(m2))
        assert not torch.equal(state_vec(m1), state_vec(m3))
