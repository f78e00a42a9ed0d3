#!/usr/bin/env python3
"""
Surrogate network
Fully connected regression network that predicts solver fitness from a
normalized parameter vector, with the R2 and F_alpha ranking metrics.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fitness_evaluator import Dataset, DatasetStage
from param_space import ParameterVector, SearchSpace, fingerprint, normalize_many
from tuner_errors import DatasetError, FingerprintMismatchError, ModelError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
HIDDEN_LAYERS = (512, 256, 128)
DROPOUT_RATE = 0.25
QUALITY_ALPHA = 0.05
QUALITY_GATE = 0.3
DEFAULT_ALPHAS = (0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def epochs_for(n_train: int) -> int:
    """Epoch schedule: floor(N_t / 50) + 50."""
    if n_train < 0:
        raise ValueError(f"n_train must be non-negative, got {n_train}")
    return n_train // 50 + 50


@dataclass
class TrainConfig:
    """ADAM/MSE training settings."""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    epochs: Optional[int] = None
    seed: int = 0
    hidden_layers: Tuple[int, ...] = HIDDEN_LAYERS
    dropout_rate: float = DROPOUT_RATE

    def epochs_for_dataset(self, n_train: int) -> int:
        epochs = self.epochs if self.epochs is not None else epochs_for(n_train)
        if epochs < 1:
            raise ModelError(f"epochs must be at least 1, got {epochs}")
        return epochs


@dataclass
class PredictionMetrics:
    mse: float
    r_squared: float
    f_alpha: Dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {'mse': self.mse, 'r_squared': self.r_squared,
                'f_alpha': {repr(a): v for a, v in self.f_alpha.items()}}


@dataclass
class MlpModel:
    """
    Weights of a sigmoid MLP with a linear output, plus the target
    standardization statistics and the fingerprint of its search space.
    """
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    fingerprint: str
    target_mean: float = 0.0
    target_std: float = 1.0
    dropout_rate: float = DROPOUT_RATE
    info: Dict[str, Any] = field(default_factory=dict)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, X: np.ndarray, rng: Optional[np.random.Generator] = None):
        """
        Forward pass in standardized target units. Dropout is applied only
        when `rng` is given.

        Returns:
            (output of shape (B,), cache for backward)
        """
        activations = [X]
        sigmoids = []
        masks = []
        a = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            s = sigmoid(a @ W + b)
            sigmoids.append(s)
            if rng is not None and self.dropout_rate > 0:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(s.shape) < keep) / keep
            else:
                mask = None
            masks.append(mask)
            a = s * mask if mask is not None else s
            activations.append(a)
        out = a @ self.weights[-1] + self.biases[-1]
        return out[:, 0], (activations, sigmoids, masks)

    def backward(self, cache, d_out: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """Gradients of the loss given d(loss)/d(output) of shape (B,)."""
        activations, sigmoids, masks = cache
        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        delta = d_out[:, None]
        grad_w[-1] = activations[-1].T @ delta
        grad_b[-1] = delta.sum(axis=0)
        d_a = delta @ self.weights[-1].T
        for layer in range(len(self.weights) - 2, -1, -1):
            if masks[layer] is not None:
                d_a = d_a * masks[layer]
            s = sigmoids[layer]
            d_z = d_a * s * (1.0 - s)
            grad_w[layer] = activations[layer].T @ d_z
            grad_b[layer] = d_z.sum(axis=0)
            if layer > 0:
                d_a = d_z @ self.weights[layer].T
        return grad_w, grad_b

    def loss_and_gradients(self, X: np.ndarray, y: np.ndarray, rng: Optional[np.random.Generator] = None):
        out, cache = self.forward(X, rng)
        err = out - y
        loss = float(np.mean(err ** 2))
        grad_w, grad_b = self.backward(cache, 2.0 * err / len(y))
        return loss, grad_w, grad_b

    def predict_standardized(self, X: np.ndarray) -> np.ndarray:
        out, _ = self.forward(X)
        return out


def init_model(n_inputs: int, cfg: TrainConfig, space_fingerprint: str, rng: np.random.Generator) -> MlpModel:
    """Glorot-uniform hidden layers; the linear output layer starts at zero."""
    sizes = [n_inputs] + list(cfg.hidden_layers) + [1]
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if layer == len(sizes) - 2:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases, fingerprint=space_fingerprint, dropout_rate=cfg.dropout_rate)


class AdamOptimizer:
    """ADAM with bias-corrected moment estimates."""

    def __init__(self, params: List[np.ndarray], learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


def _training_arrays(d: Dataset, space: SearchSpace, allow_unbalanced: bool) -> Tuple[np.ndarray, np.ndarray]:
    if d.fingerprint != fingerprint(space):
        raise FingerprintMismatchError("training dataset was built for a different search space")
    if d.stage == DatasetStage.RAW or (d.stage == DatasetStage.UNBALANCED and not allow_unbalanced):
        raise DatasetError(f"training needs a balanced dataset, got a {d.stage.value} one")
    y = d.values()
    if not np.all(np.isfinite(y)):
        raise DatasetError("training dataset contains non-finite fitness values")
    if len(d) == 0:
        raise DatasetError("training dataset is empty")
    return normalize_many(space, d.vectors()), y


def train(d_train: Dataset, space: SearchSpace, cfg: Optional[TrainConfig] = None,
          allow_unbalanced: bool = False) -> MlpModel:
    """
    Train a surrogate on a balanced dataset with mini-batch ADAM on the MSE loss.

    Args:
        d_train: Balanced training dataset
        space: Search space the dataset was sampled from
        cfg: Training settings; epochs default to epochs_for(len(d_train))
        allow_unbalanced: Accept an 'unbalanced' stage dataset (used by the balancing comparison)

    Returns:
        Trained MlpModel; info['train_mse'] holds the final full-batch training MSE
    """
    cfg = cfg or TrainConfig()
    X, y = _training_arrays(d_train, space, allow_unbalanced)
    mean = float(np.mean(y))
    std = float(np.std(y))
    if std == 0.0:
        std = 1.0
    y_std = (y - mean) / std

    rng = np.random.default_rng(cfg.seed)
    model = init_model(X.shape[1], cfg, d_train.fingerprint, rng)
    model.target_mean, model.target_std = mean, std
    optimizer = AdamOptimizer(model.weights + model.biases, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    n_weights = len(model.weights)

    epochs = cfg.epochs_for_dataset(len(y))
    logger.info(f"🧠 Training on {len(y)} samples for {epochs} epochs (layers {model.layer_sizes})")
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, grad_w, grad_b = model.loss_and_gradients(X[batch], y_std[batch], rng)
            optimizer.step(grad_w + grad_b)
        if (epoch + 1) % 100 == 0:
            logger.debug(f"Epoch {epoch + 1}/{epochs}")

    model.weights = optimizer.params[:n_weights]
    model.biases = optimizer.params[n_weights:]
    train_mse = float(np.mean((model.predict_standardized(X) * std + mean - y) ** 2))
    model.info.update({'train_mse': train_mse, 'epochs': epochs, 'n_train': len(y), 'seed': cfg.seed,
                       'mode': d_train.mode.value})
    return model


def _check_model_space(m: MlpModel, space: SearchSpace):
    if m.fingerprint != fingerprint(space):
        raise FingerprintMismatchError("model was trained on a different search space")
    if m.layer_sizes[0] != space.dimension:
        raise ModelError(f"model expects {m.layer_sizes[0]} inputs, space has {space.dimension} parameters")


def predict(m: MlpModel, space: SearchSpace, vectors: Sequence[ParameterVector]) -> np.ndarray:
    """Predicted fitness for each vector, dropout disabled, in fitness units."""
    _check_model_space(m, space)
    if not vectors:
        return np.zeros(0)
    X = normalize_many(space, vectors)
    return m.predict_standardized(X) * m.target_std + m.target_mean


# METRICS

def r_squared(truth: Sequence[float], pred: Sequence[float]) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or len(truth) < 2:
        raise ValueError("r_squared needs equal-length sequences of at least 2 values")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r_squared is undefined when all true values are equal")
    ss_res = float(np.sum((truth - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def least_count(alpha: float, n: int) -> int:
    return int(math.floor(alpha * n + 1e-9))


def f_alpha(truth: Sequence[float], pred: Sequence[float], alpha: float) -> float:
    """
    Share of the alpha-fraction least predicted values that are also among the
    alpha-fraction least true values. Ties keep index order.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError("f_alpha needs equal-length sequences")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    count = least_count(alpha, len(truth))
    if count == 0:
        raise ValueError(f"alpha={alpha} selects no values out of {len(truth)}")
    best_pred = set(np.argsort(pred, kind='stable')[:count].tolist())
    best_true = set(np.argsort(truth, kind='stable')[:count].tolist())
    return len(best_pred & best_true) / count


def optimal_alpha(truth: Sequence[float], pred: Sequence[float], candidate_alphas: Sequence[float],
                  lambda_r: int) -> Tuple[float, bool]:
    """
    Alpha maximizing F_alpha / alpha subject to F_alpha >= 1 / lambda_r.

    Returns:
        (alpha, constraint_satisfied); when no candidate satisfies the
        constraint the largest candidate is returned with False
    """
    if not candidate_alphas:
        raise ValueError("no candidate alphas given")
    best_alpha, best_ratio = None, -1.0
    for alpha in sorted(candidate_alphas):
        if least_count(alpha, len(truth)) == 0:
            continue
        score = f_alpha(truth, pred, alpha)
        if score >= 1.0 / lambda_r and score / alpha > best_ratio:
            best_alpha, best_ratio = alpha, score / alpha
    if best_alpha is None:
        fallback = max(candidate_alphas)
        logger.warning(f"⚠️ No alpha satisfies F_alpha >= 1/{lambda_r}; using the most permissive {fallback}")
        return fallback, False
    return best_alpha, True


def evaluate_predictions(truth: Sequence[float], pred: Sequence[float],
                         alphas: Sequence[float] = (QUALITY_ALPHA,)) -> PredictionMetrics:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    scores = {alpha: f_alpha(truth, pred, alpha) for alpha in alphas if least_count(alpha, len(truth)) > 0}
    return PredictionMetrics(mse=float(np.mean((truth - pred) ** 2)), r_squared=r_squared(truth, pred),
                             f_alpha=scores)


def holdout_report(m: MlpModel, space: SearchSpace, d_valid: Dataset, lambda_r: int = 5,
                   alphas: Sequence[float] = DEFAULT_ALPHAS) -> Dict[str, Any]:
    """
    Hold-out metrics of a trained model: MSE, R2, F_alpha per candidate alpha
    and the alpha picked for `lambda_r` random mutations. The report is stored
    in the model info so tuning can pick alpha automatically.
    """
    truth = d_valid.values()
    pred = predict(m, space, d_valid.vectors())
    metrics = evaluate_predictions(truth, pred, tuple(sorted(set(alphas) | {QUALITY_ALPHA})))
    alpha, satisfied = optimal_alpha(truth, pred, alphas, lambda_r)
    report = {
        'n_validation': len(d_valid),
        'mse': metrics.mse,
        'r_squared': metrics.r_squared,
        'f_alpha': {repr(a): v for a, v in metrics.f_alpha.items()},
        'optimal_alpha': alpha,
        'alpha_constraint_satisfied': satisfied,
        'lambda_r': lambda_r,
    }
    gate = metrics.f_alpha.get(QUALITY_ALPHA)
    if gate is not None and gate < QUALITY_GATE:
        logger.warning(f"⚠️ Hold-out F_{QUALITY_ALPHA} = {gate:.3f} is below {QUALITY_GATE}; "
                       f"the ranking is weak even if R2 = {metrics.r_squared:.3f} looks fine")
    m.info['holdout'] = report
    return report


# MODEL FILES

def save_model(m: MlpModel, path: str):
    """Versioned numpy archive with fingerprint, standardization statistics and weights."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    arrays = {
        'format_version': np.array(MODEL_FORMAT_VERSION),
        'fingerprint': np.array(m.fingerprint),
        'target_stats': np.array([m.target_mean, m.target_std]),
        'dropout_rate': np.array(m.dropout_rate),
        'n_layers': np.array(len(m.weights)),
        'info': np.array(json.dumps(m.info, sort_keys=True)),
    }
    for index, (W, b) in enumerate(zip(m.weights, m.biases)):
        arrays[f'W{index}'] = W
        arrays[f'b{index}'] = b
    with open(path, 'wb') as f:
        np.savez(f, **arrays)


def load_model(path: str, space: Optional[SearchSpace] = None) -> MlpModel:
    try:
        with np.load(path, allow_pickle=False) as archive:
            version = int(archive['format_version'])
            if version != MODEL_FORMAT_VERSION:
                raise ModelError(f"{path}: unsupported model format version {version}")
            n_layers = int(archive['n_layers'])
            model = MlpModel(
                weights=[archive[f'W{i}'] for i in range(n_layers)],
                biases=[archive[f'b{i}'] for i in range(n_layers)],
                fingerprint=str(archive['fingerprint']),
                target_mean=float(archive['target_stats'][0]),
                target_std=float(archive['target_stats'][1]),
                dropout_rate=float(archive['dropout_rate']),
                info=json.loads(str(archive['info'])),
            )
    except (OSError, KeyError, ValueError) as e:
        raise ModelError(f"{path}: unreadable model file: {e}")
    for W, W_next in zip(model.weights[:-1], model.weights[1:]):
        if W.shape[1] != W_next.shape[0]:
            raise ModelError(f"{path}: inconsistent layer shapes")
    if space is not None:
        _check_model_space(model, space)
    return model
