"""Semi-supervised GAN: K+1-class discriminator, generator, losses, training.

The discriminator classifies into K real classes plus a (K+1)th "generated"
class. Its loss is the sum of a supervised term over labelled data and an
unsupervised real-vs-generated term; the generator minimizes feature matching
between batch-mean intermediate activations of real and generated data.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .data import Dataset

CHECKPOINT_VERSION = 1


class EmptyBatchError(ValueError):
    """Raised when a loss or evaluation receives an empty batch."""


class DivergedTrainingError(RuntimeError):
    """Raised when a non-finite loss shows up during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class InternalConsistencyError(RuntimeError):
    """Raised on feature-dimension mismatches inside the feature matching loss."""


@dataclass(frozen=True)
class GanConfig:
    """All knobs of the GAN backend.

    Defaults follow common practice for this family of models: adaptive-moment
    optimizer at rate 3e-4, batch 64. ``feature_layer`` indexes the hidden
    activation used for feature matching (-1 = last hidden layer).
    """

    num_classes: int = 10
    latent_dim: int = 64
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 3e-4
    architecture_scale: str = "small"  # "small" | "paper"
    feature_layer: int = -1
    log_epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.log_epsilon < 1:
            raise ValueError("log_epsilon must lie in (0, 1)")
        if self.architecture_scale not in ("small", "paper"):
            raise ValueError("architecture_scale must be 'small' or 'paper'")


@dataclass(frozen=True)
class DiscriminatorOutput:
    """K+1 logits per example plus the derived distributions.

    ``probs`` is the softmax over all K+1 logits, ``class_probs`` the
    renormalized distribution over the K real classes, ``fake_prob`` the
    probability mass on the generated class.
    """

    logits: np.ndarray  # (n, K+1)
    probs: np.ndarray  # (n, K+1), rows sum to 1
    class_probs: np.ndarray  # (n, K), rows sum to 1
    fake_prob: np.ndarray  # (n,)

    @classmethod
    def from_logits(cls, logits) -> "DiscriminatorOutput":
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] < 3:
            raise ValueError("logits must be (n, K+1) with K >= 2")
        probs = _softmax(logits)
        class_probs = _softmax(logits[:, :-1])
        return cls(
            logits=logits,
            probs=probs,
            class_probs=class_probs,
            fake_prob=probs[:, -1],
        )

    @property
    def num_classes(self):
        return self.logits.shape[1] - 1


def _softmax(x):
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Networks


def _init_params(module: nn.Module, gen: torch.Generator):
    """Deterministic fan-in scaled init driven by an explicit generator."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                math.prod(m.weight.shape[2:]) if m.weight.dim() > 2 else 1
            )
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.weight.shape[0] * math.prod(m.weight.shape[2:])
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(1.0 / max(fan_in, 1)), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


_ARCH = {
    # (conv channels, fc width)
    "small": ((8, 16), 64),
    "paper": ((64, 128), 256),
}


class Discriminator(nn.Module):
    """Conv + dense classifier with K+1 outputs and tapped hidden activations."""

    def __init__(self, image_size: int, num_classes: int, scale: str = "small"):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        (c1, c2), fc = _ARCH[scale]
        s = image_size // 4
        self.conv1 = nn.Conv2d(1, c1, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 4, stride=2, padding=1)
        self.fc1 = nn.Linear(c2 * s * s, fc)
        self.head = nn.Linear(fc, num_classes + 1)
        self.act = nn.LeakyReLU(0.2)
        self.num_hidden = 3

    def hidden(self, x):
        """Per-layer hidden activations, each flattened to (B, F)."""
        h1 = self.act(self.conv1(x))
        h2 = self.act(self.conv2(h1))
        h3 = self.act(self.fc1(h2.flatten(1)))
        return [h1.flatten(1), h2.flatten(1), h3]

    def features(self, x, layer: int = -1):
        return self.hidden(x)[layer]

    def forward(self, x):
        return self.head(self.hidden(x)[-1])


class Generator(nn.Module):
    """Latent noise to single-channel images in [-1, 1]."""

    def __init__(self, image_size: int, latent_dim: int, scale: str = "small"):
        super().__init__()
        (c1, c2), _ = _ARCH[scale]
        s = image_size // 4
        self.fc = nn.Linear(latent_dim, c2 * s * s)
        self.deconv1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.deconv2 = nn.ConvTranspose2d(c1, 1, 4, stride=2, padding=1)
        self.act = nn.LeakyReLU(0.2)
        self._shape = (c2, s, s)

    def forward(self, z):
        h = self.act(self.fc(z)).view(-1, *self._shape)
        h = self.act(self.deconv1(h))
        return torch.tanh(self.deconv2(h))


# ---------------------------------------------------------------------------
# Losses. These are structural in the discriminator/generator: anything with
# forward(x) -> (B, K+1) logits and features(x, layer) -> (B, F) works, which
# is how the finite-difference gradient tests drive them with tiny nets.


def supervised_loss(disc, images, labels, log_eps: float = 1e-7):
    """Mean negative log of the renormalized true-class probability."""
    if len(images) == 0:
        raise EmptyBatchError("supervised_loss needs a non-empty batch")
    logits = disc(images)
    class_probs = torch.softmax(logits[:, :-1], dim=1)
    p_true = class_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(torch.clamp(p_true, min=log_eps)).mean()


def unsupervised_loss(disc, real_images, gen_images, log_eps: float = 1e-7):
    """Real-vs-generated term: -E log(1 - p_fake(real)) - E log p_fake(gen)."""
    if len(real_images) == 0 or len(gen_images) == 0:
        raise EmptyBatchError("unsupervised_loss needs non-empty batches")
    p_real = torch.softmax(disc(real_images), dim=1)[:, -1]
    p_gen = torch.softmax(disc(gen_images), dim=1)[:, -1]
    real_term = -torch.log(torch.clamp(1.0 - p_real, min=log_eps)).mean()
    gen_term = -torch.log(torch.clamp(p_gen, min=log_eps)).mean()
    return real_term + gen_term


def feature_matching_from_features(f_real, f_gen):
    """Squared L2 distance between batch-mean feature vectors."""
    if f_real.shape[1:] != f_gen.shape[1:]:
        raise InternalConsistencyError(
            f"feature dimensions differ: {tuple(f_real.shape[1:])} vs "
            f"{tuple(f_gen.shape[1:])}"
        )
    diff = f_real.mean(dim=0) - f_gen.mean(dim=0)
    return (diff * diff).sum()


def feature_matching_loss(disc, gen, real_images, noise, feature_layer: int = -1):
    """Feature matching between real data and generated samples G(z)."""
    if len(real_images) == 0 or len(noise) == 0:
        raise EmptyBatchError("feature_matching_loss needs non-empty batches")
    f_real = disc.features(real_images, feature_layer)
    f_gen = disc.features(gen(noise), feature_layer)
    return feature_matching_from_features(f_real, f_gen)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainedGan:
    """An immutable trained discriminator/generator pair."""

    discriminator: Discriminator
    generator: Generator
    config: GanConfig
    image_size: int
    training_history: list = field(default_factory=list)

    def _to_tensor(self, images):
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        return x.view(-1, 1, self.image_size, self.image_size)

    def predict_logits(self, images) -> np.ndarray:
        if len(images) == 0:
            k = self.config.num_classes
            return np.zeros((0, k + 1), dtype=np.float64)
        outs = []
        with torch.no_grad():
            x = self._to_tensor(images)
            for i in range(0, len(x), 512):
                outs.append(self.discriminator(x[i : i + 512]))
        return torch.cat(outs).double().numpy()

    def predict_output(self, images) -> DiscriminatorOutput:
        return DiscriminatorOutput.from_logits(self.predict_logits(images))

    def predict(self, images) -> np.ndarray:
        """Per-example class probabilities over the K real classes."""
        if len(images) == 0:
            return np.zeros((0, self.config.num_classes), dtype=np.float64)
        return self.predict_output(images).class_probs

    def features(self, images) -> np.ndarray:
        with torch.no_grad():
            f = self.discriminator.features(
                self._to_tensor(images), self.config.feature_layer
            )
        return f.double().numpy()

    def evaluate_error(self, test: Dataset) -> float:
        if len(test) == 0:
            raise EmptyBatchError("evaluate_error needs a non-empty test set")
        if test.labels is None:
            raise ValueError("evaluate_error needs a labelled test set")
        pred = self.predict(test.images).argmax(axis=1)
        return float(np.mean(pred != test.labels))

    # Loss values of this trained model on given batches (no gradients).

    def supervised_loss(self, images, labels) -> float:
        with torch.no_grad():
            return supervised_loss(
                self.discriminator,
                self._to_tensor(images),
                torch.as_tensor(np.asarray(labels, dtype=np.int64)),
                self.config.log_epsilon,
            ).item()

    def unsupervised_loss(self, real_images, gen_images) -> float:
        with torch.no_grad():
            return unsupervised_loss(
                self.discriminator,
                self._to_tensor(real_images),
                self._to_tensor(gen_images),
                self.config.log_epsilon,
            ).item()

    def feature_matching_loss(self, real_images, noise) -> float:
        with torch.no_grad():
            return feature_matching_loss(
                self.discriminator,
                self.generator,
                self._to_tensor(real_images),
                torch.as_tensor(np.asarray(noise, dtype=np.float32)),
                self.config.feature_layer,
            ).item()

    def save(self, path):
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "image_size": self.image_size,
                "discriminator": self.discriminator.state_dict(),
                "generator": self.generator.state_dict(),
                "history": self.training_history,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "TrainedGan":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        config = GanConfig(**blob["config"])
        model = cls(
            discriminator=Discriminator(
                blob["image_size"], config.num_classes, config.architecture_scale
            ),
            generator=Generator(
                blob["image_size"], config.latent_dim, config.architecture_scale
            ),
            config=config,
            image_size=blob["image_size"],
            training_history=blob["history"],
        )
        model.discriminator.load_state_dict(blob["discriminator"])
        model.generator.load_state_dict(blob["generator"])
        model.discriminator.eval()
        model.generator.eval()
        return model


class _LabelledStream:
    """Endless shuffled walk over the labelled set."""

    def __init__(self, n: int, gen: torch.Generator):
        self.n = n
        self.gen = gen
        self.perm = torch.randperm(n, generator=gen)
        self.pos = 0

    def take(self, k: int) -> torch.Tensor:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = torch.randperm(self.n, generator=self.gen)
                self.pos = 0
            grab = min(k, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + grab])
            self.pos += grab
            k -= grab
        return torch.cat(out)


def train(labelled: Dataset, unlabelled: Dataset, config: GanConfig) -> TrainedGan:
    """Adversarial training loop with fresh parameter initialization.

    Alternates one discriminator step (supervised + unsupervised terms) and
    one generator step (feature matching) per batch, for ``config.epochs``
    passes over the unlabelled pool. Deterministic per (inputs, config, seed).
    """
    if len(labelled) == 0:
        raise EmptyBatchError("train needs a non-empty labelled set")
    if labelled.labels is None:
        raise ValueError("train needs labels on the labelled set")
    if labelled.num_classes != config.num_classes:
        raise ValueError(
            f"dataset has {labelled.num_classes} classes, config says "
            f"{config.num_classes}"
        )
    image_size = labelled.images.shape[1]
    if labelled.images.shape[1] != labelled.images.shape[2]:
        raise ValueError("images must be square")

    gen_rng = torch.Generator().manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    disc = Discriminator(image_size, config.num_classes, config.architecture_scale)
    gen = Generator(image_size, config.latent_dim, config.architecture_scale)
    _init_params(disc, gen_rng)
    _init_params(gen, gen_rng)

    x_lab = torch.as_tensor(labelled.images).view(-1, 1, image_size, image_size)
    y_lab = torch.as_tensor(labelled.labels)
    # The unlabelled pool doubles as the "real" distribution of the
    # unsupervised term; when empty, the labelled images stand in.
    real = unlabelled.images if len(unlabelled) else labelled.images
    x_real = torch.as_tensor(real).view(-1, 1, image_size, image_size)

    # beta1=0.5 tames the adversarial oscillations that full momentum feeds
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate,
                             betas=(0.5, 0.999))
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate,
                             betas=(0.5, 0.999))
    lab_stream = _LabelledStream(len(x_lab), gen_rng)
    b = config.batch_size
    k = config.num_classes
    eps = config.log_epsilon
    history = []

    for epoch in range(config.epochs):
        perm = torch.randperm(len(x_real), generator=gen_rng)
        sums = {"supervised": 0.0, "unsupervised": 0.0, "feature_matching": 0.0}
        steps = 0
        for start in range(0, len(x_real), b):
            rb = x_real[perm[start : start + b]]
            lb_idx = lab_stream.take(b)
            lb, ly = x_lab[lb_idx], y_lab[lb_idx]
            z = torch.randn(b, config.latent_dim, generator=gen_rng)
            fake = gen(z)

            # Discriminator step on one concatenated forward pass.
            logits = disc(torch.cat([lb, rb, fake.detach()]))
            n_l, n_r = len(lb), len(rb)
            lg_lab, lg_real, lg_fake = (
                logits[:n_l],
                logits[n_l : n_l + n_r],
                logits[n_l + n_r :],
            )
            class_probs = torch.softmax(lg_lab[:, :k], dim=1)
            p_true = class_probs.gather(1, ly.view(-1, 1)).squeeze(1)
            sup = -torch.log(torch.clamp(p_true, min=eps)).mean()
            p_fake_real = torch.softmax(lg_real, dim=1)[:, k]
            p_fake_gen = torch.softmax(lg_fake, dim=1)[:, k]
            unsup = (
                -torch.log(torch.clamp(1.0 - p_fake_real, min=eps)).mean()
                - torch.log(torch.clamp(p_fake_gen, min=eps)).mean()
            )
            opt_d.zero_grad()
            (sup + unsup).backward()
            opt_d.step()

            # Generator step: feature matching against the updated D.
            with torch.no_grad():
                f_real = disc.features(rb, config.feature_layer)
            z2 = torch.randn(b, config.latent_dim, generator=gen_rng)
            f_gen = disc.features(gen(z2), config.feature_layer)
            fm = feature_matching_from_features(f_real, f_gen)
            opt_g.zero_grad()
            fm.backward()
            opt_g.step()

            sums["supervised"] += sup.item()
            sums["unsupervised"] += unsup.item()
            sums["feature_matching"] += fm.item()
            steps += 1

        means = {key: val / steps for key, val in sums.items()}
        if not all(math.isfinite(v) for v in means.values()):
            raise DivergedTrainingError(epoch)
        history.append(means)

    disc.eval()
    gen.eval()
    return TrainedGan(
        discriminator=disc,
        generator=gen,
        config=config,
        image_size=image_size,
        training_history=history,
    )


def generate(model: TrainedGan, n: int, seed: int) -> Dataset:
    """Draw n images from the generator; fresh ids, tagged as generated."""
    if n < 0:
        raise ValueError("n must be >= 0")
    size = model.image_size
    if n == 0:
        images = np.zeros((0, size, size), dtype=np.float32)
    else:
        rng = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        outs = []
        with torch.no_grad():
            for start in range(0, n, 512):
                z = torch.randn(
                    min(512, n - start), model.config.latent_dim, generator=rng
                )
                outs.append(model.generator(z).clamp(-1.0, 1.0))
        images = torch.cat(outs).view(n, size, size).numpy()
    return Dataset(
        images=images,
        ids=np.arange(n, dtype=np.int64),
        num_classes=model.config.num_classes,
        source="generated",
    )


def evaluate_error(model: TrainedGan, test: Dataset) -> float:
    return model.evaluate_error(test)


@dataclass
class GanBackend:
    """The GAN as a pluggable classifier backend for the self-training loops."""

    config: GanConfig

    def train_on(self, labelled: Dataset, unlabelled: Dataset, seed: int) -> TrainedGan:
        return train(labelled, unlabelled, replace(self.config, seed=seed))

    def predict_proba(self, model: TrainedGan, images) -> np.ndarray:
        return model.predict(images)

    def generate(self, model: TrainedGan, n: int, seed: int) -> Dataset:
        return generate(model, n, seed)
