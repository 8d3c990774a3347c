"""Self-training meta-algorithms over a pluggable classifier backend.

Two schemes grow the labelled pool from unlabelled and generated data:

* basic: move every candidate whose max predicted probability strictly
  exceeds a confidence threshold.
* rejection: corrupt the labels of sampled candidate subsets, retrain a
  hypothesis per subset, and add the subset whose corruption produced the
  largest prediction disagreement with an uncorrupted reference hypothesis.

Both retrain the backend from scratch each round, relabel everything they
ever added with the newest model, and append freshly generated samples to the
unlabelled pool so later rounds can pseudo-label them too.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, NamedTuple, Protocol

import numpy as np

from .data import Dataset, concat


class InvalidDistributionError(ValueError):
    """Raised when a probability vector is not normalized."""


class EmptyInputError(ValueError):
    """Raised when an operation needs a non-empty input."""


class NoAlternativeLabelError(ValueError):
    """Raised when labels cannot be corrupted because K < 2."""


class ClassifierBackend(Protocol):
    """Capability bundle the self-training loops need from a classifier."""

    def train_on(self, labelled: Dataset, unlabelled: Dataset, seed: int) -> Any: ...

    def predict_proba(self, model: Any, images) -> np.ndarray: ...

    def generate(self, model: Any, n: int, seed: int) -> Dataset: ...


@dataclass(frozen=True)
class SelfTrainConfig:
    """Knobs of both self-training schemes."""

    scheme: str = "basic"  # "basic" | "rejection"
    threshold: float = 0.95
    num_rounds: int = 2
    n_subsets: int = 4
    sample_frac: float = 0.2
    gen_per_round: int = 10_000
    seed: int = 0
    # Literal reading of the algorithms: examples moved into the labelled set
    # stay in the unlabelled pool's role for the adversarial term. Toggleable.
    exclude_added_from_unlabelled: bool = False

    def __post_init__(self):
        if self.scheme not in ("basic", "rejection"):
            raise ValueError("scheme must be 'basic' or 'rejection'")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.num_rounds < 0:
            raise ValueError("num_rounds must be >= 0")
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")
        if not 0 < self.sample_frac <= 1:
            raise ValueError("sample_frac must lie in (0, 1]")
        if self.gen_per_round < 0:
            raise ValueError("gen_per_round must be >= 0")


@dataclass
class PseudoLabelRecord:
    """Provenance of one example moved into the labelled pool."""

    example_id: int
    label: int
    round_added: int
    source: str  # "real" | "generated"
    confidence: float  # max predicted probability at addition time


@dataclass
class RoundRecord:
    """Metrics of one self-training round (or the final retrain)."""

    round: int
    is_final: bool
    test_error: float | None
    val_error: float | None
    selection_error: float
    selection_metric: str  # "validation" | "train_labelled"
    count_added: int
    total_added: int
    candidates_before: int
    pseudo_label_accuracy: float | None = None
    disagreements: list[float] | None = None
    u_delta_size: int | None = None
    subset_size: int | None = None
    skipped_addition: bool = False
    model: Any = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model"}
        return d


class SelfTrainResult(NamedTuple):
    best_model: Any
    records: list
    pool: "PoolState"


def derive_seed(base: int, *parts) -> int:
    """Stable 63-bit seed derived from a base seed and arbitrary labels."""
    tag = ":".join([str(base), *map(str, parts)])
    digest = hashlib.sha256(tag.encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Pool bookkeeping


class PoolState:
    """The evolving partition into labelled pool L, unlabelled pool U and
    candidate set U-hat, with provenance for every pseudo-labelled addition.

    Ids moved into L never re-enter the candidate set. Iteration order is
    insertion order everywhere, which keeps the loops deterministic.
    """

    def __init__(self, labelled: Dataset, unlabelled: Dataset):
        if labelled.labels is None:
            raise ValueError("labelled dataset must carry labels")
        self.num_classes = labelled.num_classes
        self.images: dict[int, np.ndarray] = {}
        self.original: dict[int, int] = {}
        self.added: dict[int, PseudoLabelRecord] = {}
        self.u_ids: list[int] = []
        self.candidates: dict[int, None] = {}
        self.source: dict[int, str] = {}
        self.shadow: dict[int, int] = {}

        for i, img, lab in zip(labelled.ids, labelled.images, labelled.labels):
            i = int(i)
            self.images[i] = img
            self.original[i] = int(lab)
            self.source[i] = labelled.source
        for i, img in zip(unlabelled.ids, unlabelled.images):
            i = int(i)
            if i in self.original:
                raise ValueError(f"id {i} appears in both pools")
            self.images[i] = img
            self.u_ids.append(i)
            self.source[i] = unlabelled.source
            self.candidates[i] = None
        self.shadow = unlabelled.shadow_map()
        self._next_id = max(self.images, default=-1) + 1
        self._image_shape = (
            labelled.images.shape[1:] if len(labelled) else unlabelled.images.shape[1:]
        )

    # -- views ---------------------------------------------------------------

    def _stack(self, ids):
        if not ids:
            return np.zeros((0, *self._image_shape), dtype=np.float32)
        return np.stack([self.images[i] for i in ids])

    def labelled_ids(self) -> list[int]:
        return list(self.original) + list(self.added)

    def labelled_dataset(self) -> Dataset:
        ids = self.labelled_ids()
        labels = [
            self.original[i] if i in self.original else self.added[i].label
            for i in ids
        ]
        return Dataset(
            images=self._stack(ids),
            ids=np.asarray(ids, dtype=np.int64),
            num_classes=self.num_classes,
            labels=np.asarray(labels, dtype=np.int64),
        )

    def original_labelled_dataset(self) -> Dataset:
        ids = list(self.original)
        return Dataset(
            images=self._stack(ids),
            ids=np.asarray(ids, dtype=np.int64),
            num_classes=self.num_classes,
            labels=np.asarray([self.original[i] for i in ids], dtype=np.int64),
        )

    def unlabelled_ids(self, exclude_added: bool = False) -> list[int]:
        if exclude_added:
            return [i for i in self.u_ids if i not in self.added]
        return list(self.u_ids)

    def unlabelled_dataset(self, exclude_added: bool = False) -> Dataset:
        ids = self.unlabelled_ids(exclude_added)
        return Dataset(
            images=self._stack(ids),
            ids=np.asarray(ids, dtype=np.int64),
            num_classes=self.num_classes,
        )

    def candidate_ids(self) -> list[int]:
        return list(self.candidates)

    def candidate_images(self) -> np.ndarray:
        return self._stack(self.candidate_ids())

    def pseudo_labelled_rest(self, labels_by_id: dict[int, int], exclude) -> Dataset:
        """The unlabelled pool minus ``exclude``, carrying pseudo-labels.

        Ids already in the labelled pool are left out so the result can be
        concatenated with it.
        """
        skip = set(exclude) | set(self.original) | set(self.added)
        ids = [i for i in self.u_ids if i not in skip]
        return Dataset(
            images=self._stack(ids),
            ids=np.asarray(ids, dtype=np.int64),
            num_classes=self.num_classes,
            labels=np.asarray([labels_by_id[i] for i in ids], dtype=np.int64),
        )

    # -- mutations -----------------------------------------------------------

    def add_pseudo(self, example_id: int, label: int, round_added: int, conf: float):
        if example_id in self.original or example_id in self.added:
            raise ValueError(f"id {example_id} is already labelled")
        if example_id not in self.candidates:
            raise ValueError(f"id {example_id} is not a candidate")
        self.added[example_id] = PseudoLabelRecord(
            example_id=example_id,
            label=int(label),
            round_added=round_added,
            source=self.source[example_id],
            confidence=float(conf),
        )
        del self.candidates[example_id]

    def append_generated(self, generated: Dataset, to_candidates: bool = True):
        """Give generated examples fresh ids and push them into U (and U-hat)."""
        generated = generated.with_fresh_ids(self._next_id)
        self._next_id += len(generated)
        for i, img in zip(generated.ids, generated.images):
            i = int(i)
            self.images[i] = img
            self.u_ids.append(i)
            self.source[i] = "generated"
            if to_candidates:
                self.candidates[i] = None
        return generated.ids

    def pseudo_label_accuracy(self) -> float | None:
        """Fraction of real-source added examples whose label matches the
        shadow truth. None when nothing real was added."""
        real = [r for r in self.added.values() if r.source == "real"]
        if not real:
            return None
        hits = sum(1 for r in real if self.shadow.get(r.example_id) == r.label)
        return hits / len(real)

    def check_conservation(self):
        """Ids partition cleanly: candidates are unlabelled-pool members that
        were never added, and added ids never reappear as candidates."""
        u = set(self.u_ids)
        cand = set(self.candidates)
        assert cand <= u, "candidates must be a subset of the unlabelled pool"
        assert not (cand & set(self.added)), "added ids must leave the candidates"
        assert not (set(self.original) & set(self.added)), (
            "original labels are never pseudo-labels"
        )


# ---------------------------------------------------------------------------
# Operations


def negative_entropy(p, tol: float = 1e-4) -> float:
    """Sum of p_i * ln(p_i) with 0 * ln(0) = 0; in [-ln K, 0].

    Larger means more confident: this is the proxy for distance from the
    decision boundary.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise InvalidDistributionError("p must be a non-empty 1-D distribution")
    if p.min() < -tol or abs(p.sum() - 1.0) > tol:
        raise InvalidDistributionError(
            f"p must be a distribution (sum {p.sum():.6g}, min {p.min():.6g})"
        )
    p = np.clip(p, 0.0, None)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz])))


def negative_entropy_batch(probs) -> np.ndarray:
    """Row-wise negative entropy of an (n, K) array of distributions."""
    probs = np.asarray(probs, dtype=np.float64)
    safe = np.where(probs > 0, probs, 1.0)
    return np.sum(probs * np.log(safe), axis=1)


def confident_half(scores: dict) -> set:
    """Ids scoring strictly above the median score (U_delta)."""
    if not scores:
        raise EmptyInputError("confident_half needs at least one score")
    values = np.asarray(list(scores.values()), dtype=np.float64)
    delta = float(np.median(values))
    return {i for i, s in scores.items() if s > delta}


def corrupt_labels(subset: dict, K: int, seed: int) -> dict:
    """Replace every label with a uniformly drawn different one."""
    if K < 2:
        raise NoAlternativeLabelError("need at least 2 classes to corrupt labels")
    rng = np.random.default_rng(seed)
    out = {}
    for i in sorted(subset):
        label = subset[i]
        if not 0 <= label < K:
            raise ValueError(f"label {label} out of range for K={K}")
        draw = int(rng.integers(0, K - 1))
        out[i] = draw if draw < label else draw + 1
    return out


def calculate_disagreement(backend: ClassifierBackend, h1, h2, images) -> float:
    """Fraction of examples on which the two models' argmax predictions
    differ. Symmetric in (h1, h2)."""
    if len(images) == 0:
        raise EmptyInputError("calculate_disagreement needs a non-empty sample")
    a = np.asarray(backend.predict_proba(h1, images)).argmax(axis=1)
    b = np.asarray(backend.predict_proba(h2, images)).argmax(axis=1)
    return float(np.mean(a != b))


def relabel_added(pool: PoolState, backend: ClassifierBackend, model) -> PoolState:
    """Relabel every pseudo-labelled example with the current model's argmax.

    Original (human) labels are never touched; addition-time confidences are
    kept as recorded.
    """
    ids = list(pool.added)
    if not ids:
        return pool
    probs = backend.predict_proba(model, pool._stack(ids))
    labels = np.asarray(probs).argmax(axis=1)
    for i, label in zip(ids, labels):
        pool.added[i].label = int(label)
    return pool


# ---------------------------------------------------------------------------
# The meta-algorithms


def _evaluate(backend, model, dataset: Dataset) -> float:
    pred = np.asarray(backend.predict_proba(model, dataset.images)).argmax(axis=1)
    return float(np.mean(pred != dataset.labels))


def _make_record(
    pool, backend, model, rnd, is_final, count_added, candidates_before, test, val, **kw
) -> RoundRecord:
    if val is not None and len(val):
        sel_metric, sel_err = "validation", _evaluate(backend, model, val)
    else:
        sel_metric = "train_labelled"
        sel_err = _evaluate(backend, model, pool.original_labelled_dataset())
    return RoundRecord(
        round=rnd,
        is_final=is_final,
        test_error=_evaluate(backend, model, test) if test is not None else None,
        val_error=sel_err if sel_metric == "validation" else None,
        selection_error=sel_err,
        selection_metric=sel_metric,
        count_added=count_added,
        total_added=len(pool.added),
        candidates_before=candidates_before,
        pseudo_label_accuracy=pool.pseudo_label_accuracy(),
        model=model,
        **kw,
    )


def _finish(backend, pool, cfg, records, test, val) -> SelfTrainResult:
    """Final retrain and best-model selection by lowest selection error."""
    final_seed = derive_seed(cfg.seed, "train", cfg.num_rounds + 1)
    model = backend.train_on(
        pool.labelled_dataset(),
        pool.unlabelled_dataset(cfg.exclude_added_from_unlabelled),
        final_seed,
    )
    records.append(
        _make_record(
            pool, backend, model, cfg.num_rounds + 1, True, 0,
            len(pool.candidates), test, val,
        )
    )
    best = min(records, key=lambda r: (r.selection_error, r.round))
    return SelfTrainResult(best_model=best.model, records=records, pool=pool)


def basic_self_train(
    L: Dataset,
    U: Dataset,
    backend: ClassifierBackend,
    cfg: SelfTrainConfig,
    test: Dataset | None = None,
    val: Dataset | None = None,
) -> SelfTrainResult:
    """Confidence-threshold self-training.

    Per round: retrain from scratch, move every candidate whose max predicted
    probability strictly exceeds the threshold into the labelled pool with its
    argmax label, relabel all previous additions, then generate new samples
    and append them to the unlabelled pool and the candidate set.
    """
    if cfg.scheme != "basic":
        raise ValueError("basic_self_train needs cfg.scheme == 'basic'")
    pool = PoolState(L, U)
    records: list[RoundRecord] = []

    for rnd in range(1, cfg.num_rounds + 1):
        model = backend.train_on(
            pool.labelled_dataset(),
            pool.unlabelled_dataset(cfg.exclude_added_from_unlabelled),
            derive_seed(cfg.seed, "train", rnd),
        )
        cand_ids = pool.candidate_ids()
        n_before = len(cand_ids)
        added = 0
        if cand_ids:
            probs = np.asarray(backend.predict_proba(model, pool.candidate_images()))
            conf = probs.max(axis=1)
            labels = probs.argmax(axis=1)
            for i, c, lab in zip(cand_ids, conf, labels):
                if c > cfg.threshold:  # strictly greater: ties are not added
                    pool.add_pseudo(i, int(lab), rnd, float(c))
                    added += 1
        relabel_added(pool, backend, model)
        if cfg.gen_per_round:
            gen = backend.generate(model, cfg.gen_per_round, derive_seed(cfg.seed, "gen", rnd))
            if len(gen):
                pool.append_generated(gen, to_candidates=True)
        pool.check_conservation()
        records.append(
            _make_record(pool, backend, model, rnd, False, added, n_before, test, val)
        )

    return _finish(backend, pool, cfg, records, test, val)


def rejection_self_train(
    L: Dataset,
    U: Dataset,
    backend: ClassifierBackend,
    cfg: SelfTrainConfig,
    test: Dataset | None = None,
    val: Dataset | None = None,
) -> SelfTrainResult:
    """Selection-by-rejection self-training.

    Per round: train h, then a reference hypothesis h-hat on everything
    pseudo-labelled by h. Score candidates by negative entropy, keep the
    confident half above the median, sample n subsets of it, corrupt each
    subset's labels and train a hypothesis per subset. The subset whose
    corruption caused the most disagreement with h-hat (measured on the whole
    unlabelled pool) is added to the labelled pool with h's uncorrupted
    labels, and is never a candidate again.
    """
    if cfg.scheme != "rejection":
        raise ValueError("rejection_self_train needs cfg.scheme == 'rejection'")
    pool = PoolState(L, U)
    records: list[RoundRecord] = []

    for rnd in range(1, cfg.num_rounds + 1):
        unlab = pool.unlabelled_dataset(cfg.exclude_added_from_unlabelled)
        model = backend.train_on(
            pool.labelled_dataset(), unlab, derive_seed(cfg.seed, "train", rnd)
        )

        # Pseudo-labels by h over the whole unlabelled pool.
        u_ids = pool.unlabelled_ids()
        u_images = pool._stack(u_ids)
        u_probs = np.asarray(backend.predict_proba(model, u_images))
        pseudo = {i: int(l) for i, l in zip(u_ids, u_probs.argmax(axis=1))}

        def supervised_pool(exclude_ids):
            rest = pool.pseudo_labelled_rest(pseudo, exclude_ids)
            parts = [pool.labelled_dataset()]
            if len(rest):
                parts.append(rest)
            return concat(parts)

        h_hat = backend.train_on(
            supervised_pool(()), unlab, derive_seed(cfg.seed, "hhat", rnd)
        )

        cand_ids = pool.candidate_ids()
        n_before = len(cand_ids)
        extras: dict = {"disagreements": None, "u_delta_size": None, "subset_size": None}
        added = 0
        skipped = False
        u_delta: set = set()
        if cand_ids:
            cand_index = {i: j for j, i in enumerate(u_ids)}
            scores = {
                i: float(s)
                for i, s in zip(
                    cand_ids,
                    negative_entropy_batch(
                        u_probs[[cand_index[i] for i in cand_ids]]
                    ),
                )
            }
            u_delta = confident_half(scores)
        if not u_delta:
            skipped = True
        else:
            sorted_delta = sorted(u_delta)
            subset_size = int(round(cfg.sample_frac * len(sorted_delta)))
            subsets = []
            hypotheses = []
            for i in range(1, cfg.n_subsets + 1):
                rng = np.random.default_rng(derive_seed(cfg.seed, "subset", rnd, i))
                u_i = (
                    list(rng.choice(sorted_delta, size=subset_size, replace=False))
                    if subset_size
                    else []
                )
                u_i = [int(x) for x in u_i]
                corrupted = corrupt_labels(
                    {x: pseudo[x] for x in u_i},
                    pool.num_classes,
                    derive_seed(cfg.seed, "corrupt", rnd, i),
                )
                corrupt_ds = Dataset(
                    images=pool._stack(sorted(corrupted)),
                    ids=np.asarray(sorted(corrupted), dtype=np.int64),
                    num_classes=pool.num_classes,
                    labels=np.asarray(
                        [corrupted[x] for x in sorted(corrupted)], dtype=np.int64
                    ),
                ) if corrupted else None
                parts = supervised_pool(u_i)
                if corrupt_ds is not None:
                    parts = concat([parts, corrupt_ds])
                h_i = backend.train_on(
                    parts, unlab, derive_seed(cfg.seed, "hyp", rnd, i)
                )
                subsets.append(u_i)
                hypotheses.append(h_i)

            disagreements = [
                calculate_disagreement(backend, h_hat, h_i, u_images)
                for h_i in hypotheses
            ]
            # Lowest index wins ties.
            winner = int(np.argmax(disagreements))
            u_r = subsets[winner]
            relabel_added(pool, backend, model)
            for i in u_r:
                pool.add_pseudo(i, pseudo[i], rnd, float(u_probs[cand_index[i]].max()))
                added += 1
            extras = {
                "disagreements": [float(d) for d in disagreements],
                "u_delta_size": len(u_delta),
                "subset_size": subset_size,
            }
        if skipped:
            relabel_added(pool, backend, model)

        if cfg.gen_per_round:
            gen = backend.generate(
                model, cfg.gen_per_round, derive_seed(cfg.seed, "gen", rnd)
            )
            if len(gen):
                pool.append_generated(gen, to_candidates=True)
        pool.check_conservation()
        records.append(
            _make_record(
                pool, backend, model, rnd, False, added, n_before, test, val,
                skipped_addition=skipped, **extras,
            )
        )

    return _finish(backend, pool, cfg, records, test, val)
