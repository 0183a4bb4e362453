"""Estimator-style facade so the pipeline composes with sklearn-ish tooling.

Every estimator stores its constructor arguments verbatim and exposes
``get_params`` / ``set_params`` following the scikit-learn convention, without
depending on scikit-learn itself. ``fit`` returns ``self``.
"""

from __future__ import annotations

import inspect
import os
import tempfile

import numpy as np

from .errors import ContractError, DataError
from .evaluation import EmbeddingSet, pcr_debias, project_2d
from .model import EncoderConfig, embed_texts
from .spectral import first_principal_direction
from .training import TrainPlan, load_checkpoint, run_plan


def check_matrix(x, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """Validate a dense 2-d float matrix with finite entries."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-d, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ContractError(f"{name} needs at least {min_rows} rows")
    if arr.dtype.kind not in "fiu":
        raise ContractError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_tags(tags, n_rows: int) -> list[str]:
    tags = [str(t) for t in tags]
    if len(tags) != n_rows:
        raise ContractError(
            f"expected {n_rows} tags, got {len(tags)}")
    return tags


class BaseEstimator:
    """Minimal parameter-introspection base (get_params/set_params)."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values()
                if p.name != "self" and p.kind
                in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "BaseEstimator":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ContractError(
                    f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in sorted(self.get_params().items()))
        return f"{type(self).__name__}({args})"


class SentenceEncoder(BaseEstimator):
    """Trainable sentence embedder: fit on documents, transform sentences.

    ``fit`` accepts either a corpus file path or an in-memory list of
    documents (each a list of sentences, or a ``(language, sentences)``
    tuple). Training follows the configured multistage plan; ``transform``
    embeds sentences with the frozen encoder.
    """

    def __init__(self, strategy: str = "cmlm_only", steps: int = 2000,
                 stage2_steps: int = 0, hidden: int = 64, layers: int = 2,
                 heads: int = 4, ff: int = 128, max_len: int = 64,
                 n_projections: int = 15, pooling: str = "mean",
                 dropout: float = 0.1, vocab_size: int = 256,
                 batch_size: int = 32, num_mask: int = 0, alpha: float = 0.2,
                 margin: float = 0.3, learning_rate: float = 1e-3,
                 warmup_steps: int = 100, optimizer: str = "lamb",
                 variant: str = "standard", representation: str = "pooled",
                 bitext_path: str = "", nli_path: str = "", nli_steps: int = 0,
                 seed: int = 0, out_dir: str = ""):
        self.strategy = strategy
        self.steps = steps
        self.stage2_steps = stage2_steps
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.ff = ff
        self.max_len = max_len
        self.n_projections = n_projections
        self.pooling = pooling
        self.dropout = dropout
        self.vocab_size = vocab_size
        self.batch_size = batch_size
        self.num_mask = num_mask
        self.alpha = alpha
        self.margin = margin
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.optimizer = optimizer
        self.variant = variant
        self.representation = representation
        self.bitext_path = bitext_path
        self.nli_path = nli_path
        self.nli_steps = nli_steps
        self.seed = seed
        self.out_dir = out_dir

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size, layers=self.layers, heads=self.heads,
            hidden=self.hidden, ff=self.ff, max_len=self.max_len,
            n_projections=self.n_projections, pooling=self.pooling,
            dropout=self.dropout)

    def _plan(self, corpus_path: str) -> TrainPlan:
        return TrainPlan(
            strategy=self.strategy, stage1_steps=self.steps,
            stage2_steps=self.stage2_steps, nli_steps=self.nli_steps,
            alpha=self.alpha, margin=self.margin, batch_size=self.batch_size,
            num_mask=self.num_mask, variant=self.variant,
            optimizer=self.optimizer, learning_rate=self.learning_rate,
            warmup_steps=self.warmup_steps, seed=self.seed,
            corpus_path=corpus_path, bitext_path=self.bitext_path,
            nli_path=self.nli_path, out_dir=self.out_dir)

    def fit(self, documents, y=None) -> "SentenceEncoder":
        if isinstance(documents, str):
            corpus_path = documents
            tmp = None
        else:
            tmp = tempfile.NamedTemporaryFile(
                "w", suffix=".txt", delete=False, encoding="utf-8")
            with tmp as fh:
                for i, doc in enumerate(documents):
                    tag, sentences = doc if isinstance(doc, tuple) else ("base", doc)
                    if i:
                        fh.write("\n")
                    for sentence in sentences:
                        fh.write(f"{tag}\t{sentence}\n")
            corpus_path = tmp.name
        try:
            params, history, handles = run_plan(self._encoder_config(),
                                                self._plan(corpus_path))
        finally:
            if tmp is not None:
                os.unlink(corpus_path)
        self.params_ = params
        self.config_ = handles.config
        self.vocab_ = handles.vocab
        self.history_ = history
        return self

    def load(self, checkpoint_path: str) -> "SentenceEncoder":
        """Adopt a previously trained checkpoint instead of fitting."""
        bundle = load_checkpoint(checkpoint_path)
        self.params_ = bundle.params
        self.config_ = bundle.config
        self.vocab_ = bundle.vocab
        self.history_ = []
        return self

    def transform(self, sentences) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise ContractError("SentenceEncoder is not fitted")
        representation = "proj_mean" if self.representation in (
            "proj_mean", "proj-mean") else "pooled"
        return embed_texts(list(sentences), self.params_, self.config_,
                           self.vocab_, representation=representation)

    def fit_transform(self, documents, y=None) -> np.ndarray:
        self.fit(documents)
        sentences = []
        if not isinstance(documents, str):
            for doc in documents:
                _, doc_sentences = doc if isinstance(doc, tuple) else ("base", doc)
                sentences.extend(doc_sentences)
        if not sentences:
            raise DataError("fit_transform needs in-memory documents")
        return self.transform(sentences)


class PrincipalComponentRemover(BaseEstimator):
    """Removes each row's projection onto its group's top singular direction.

    Directions are learned per language tag on ``fit`` and reapplied by
    ``transform``; ``fit_transform`` recomputes them from the given rows,
    matching the evaluation-time protocol.
    """

    def __init__(self):
        pass

    def fit(self, X, tags=None) -> "PrincipalComponentRemover":
        x = check_matrix(X)
        tags = check_tags(tags if tags is not None else ["all"] * len(x), len(x))
        self.directions_ = {}
        arr = np.asarray(tags)
        for tag in sorted(set(tags)):
            self.directions_[tag] = first_principal_direction(x[arr == tag])
        return self

    def transform(self, X, tags=None) -> np.ndarray:
        if not hasattr(self, "directions_"):
            raise ContractError("PrincipalComponentRemover is not fitted")
        x = check_matrix(X)
        tags = check_tags(tags if tags is not None else ["all"] * len(x), len(x))
        out = x.copy()
        for i, tag in enumerate(tags):
            direction = self.directions_.get(tag)
            if direction is None:
                raise DataError(f"no direction learned for tag {tag!r}")
            out[i] = out[i] - (out[i] @ direction) * direction
        return out

    def fit_transform(self, X, tags=None) -> np.ndarray:
        x = check_matrix(X)
        tags = check_tags(tags if tags is not None else ["all"] * len(x), len(x))
        return pcr_debias(EmbeddingSet(x, tags)).vectors


class LogisticProbe(BaseEstimator):
    """Frozen-feature multinomial logistic regression (full-batch GD)."""

    def __init__(self, learning_rate: float = 0.5, steps: int = 500):
        self.learning_rate = learning_rate
        self.steps = steps

    def fit(self, X, y) -> "LogisticProbe":
        x = check_matrix(X)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ContractError("probe needs at least two classes")
        index = {c: i for i, c in enumerate(self.classes_.tolist())}
        labels = np.array([index[c] for c in y.tolist()])
        self._mu = x.mean(axis=0)
        self._sigma = np.maximum(x.std(axis=0), 1e-8)
        xs = (x - self._mu) / self._sigma
        k = self.classes_.size
        w = np.zeros((x.shape[1], k))
        b = np.zeros(k)
        onehot = np.eye(k)[labels]
        for _ in range(self.steps):
            logits = xs @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            grad = (probs - onehot) / len(xs)
            w -= self.learning_rate * (xs.T @ grad)
            b -= self.learning_rate * grad.sum(axis=0)
        self.coef_ = w
        self.intercept_ = b
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "coef_"):
            raise ContractError("LogisticProbe is not fitted")
        xs = (check_matrix(X) - self._mu) / self._sigma
        return self.classes_[np.argmax(xs @ self.coef_ + self.intercept_, axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


class PlanarProjector(BaseEstimator):
    """Projects rows onto the top-2 principal directions of the fitted data."""

    def __init__(self):
        pass

    def fit(self, X, y=None) -> "PlanarProjector":
        x = check_matrix(X, min_rows=3)
        es = EmbeddingSet(x, ["all"] * len(x))
        project_2d(es)  # validates rank >= 2
        self._mean = x.mean(axis=0)
        from .spectral import top_two_directions
        self.directions_ = np.stack(top_two_directions(x - self._mean))
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "directions_"):
            raise ContractError("PlanarProjector is not fitted")
        x = check_matrix(X)
        return (x - self._mean) @ self.directions_.T

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X).transform(X)
