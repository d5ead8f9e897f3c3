"""Minimal dense networks in numpy: denoising autoencoder + regressor.

Everything (layers, batch norm, Adam, backprop) is implemented here in
float64 so gradients can be audited against central finite differences.

Autoencoders are hourglass-shaped: hidden widths halve from the input
dimension down to the latent size, the decoder mirrors the encoder.
Hidden layers are Dense -> BatchNorm -> ReLU; latent and output layers
are plain linear. Training corrupts inputs with Gaussian noise and
per-variable block dropout (one whole variable's coefficient block
zeroed) while the reconstruction target stays clean.

The suitability head maps latent codes through 64 -> 32 -> 1 with a
linear output, trained under RMSE loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass
class TrainParams:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1000
    noise_std: float = 0.05
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive: {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError(f"dropout_rate outside [0, 1]: {self.dropout_rate}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative: {self.noise_std}")


class DenseLayer:
    """x @ W + b, optional batch norm, then ReLU or identity."""

    def __init__(self, n_in: int, n_out: int, activation: str = "relu",
                 batch_norm: bool = True, rng: np.random.Generator | None = None):
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation: {activation!r}")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.batch_norm = batch_norm
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
        self.W = rng.normal(0.0, scale, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        if batch_norm:
            self.gamma = np.ones(n_out)
            self.beta = np.zeros(n_out)
            self.run_mean = np.zeros(n_out)
            self.run_var = np.ones(n_out)

    # trainable parameters in canonical order
    def params(self) -> list[np.ndarray]:
        if self.batch_norm:
            return [self.W, self.b, self.gamma, self.beta]
        return [self.W, self.b]

    def forward(self, x: np.ndarray, training: bool, frozen_bn: bool = False):
        z = x @ self.W + self.b
        cache = {"x": x, "z": z}
        if self.batch_norm:
            if training and not frozen_bn:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                self.run_mean = (1.0 - _BN_MOMENTUM) * self.run_mean + _BN_MOMENTUM * mu
                self.run_var = (1.0 - _BN_MOMENTUM) * self.run_var + _BN_MOMENTUM * var
            else:
                mu = self.run_mean
                var = self.run_var
            inv = 1.0 / np.sqrt(var + _BN_EPS)
            zh = (z - mu) * inv
            u = self.gamma * zh + self.beta
            cache.update(mu=mu, var=var, inv=inv, zh=zh,
                         batch_stats=training and not frozen_bn)
        else:
            u = z
        cache["u"] = u
        a = np.maximum(u, 0.0) if self.activation == "relu" else u
        return a, cache

    def backward(self, da: np.ndarray, cache: dict):
        u = cache["u"]
        du = da * (u > 0.0) if self.activation == "relu" else da
        grads = {}
        if self.batch_norm:
            zh, inv = cache["zh"], cache["inv"]
            grads["gamma"] = np.sum(du * zh, axis=0)
            grads["beta"] = np.sum(du, axis=0)
            dzh = du * self.gamma
            if cache["batch_stats"]:
                m = du.shape[0]
                z, mu = cache["z"], cache["mu"]
                dvar = np.sum(dzh * (z - mu) * -0.5 * inv ** 3, axis=0)
                dmu = np.sum(-dzh * inv, axis=0) + dvar * np.mean(-2.0 * (z - mu), axis=0)
                dz = dzh * inv + dvar * 2.0 * (z - mu) / m + dmu / m
            else:
                dz = dzh * inv
        else:
            dz = du
        grads["W"] = cache["x"].T @ dz
        grads["b"] = np.sum(dz, axis=0)
        dx = dz @ self.W.T
        glist = [grads["W"], grads["b"]]
        if self.batch_norm:
            glist += [grads["gamma"], grads["beta"]]
        return dx, glist


class DenseNet:
    """A stack of DenseLayers with flat parameter access."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        self.layers = layers

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, x: np.ndarray, training: bool = False,
                frozen_bn: bool = False, want_cache: bool = False):
        caches = [] if want_cache else None
        for layer in self.layers:
            x, cache = layer.forward(x, training=training, frozen_bn=frozen_bn)
            if want_cache:
                caches.append(cache)
        return (x, caches) if want_cache else x

    def backward(self, dout: np.ndarray, caches: list[dict]):
        grads: list[list[np.ndarray]] = [None] * len(self.layers)
        dx = dout
        for i in range(len(self.layers) - 1, -1, -1):
            dx, glist = self.layers[i].backward(dx, caches[i])
            grads[i] = glist
        return [g for glist in grads for g in glist]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params():
            p.flat[:] = flat[pos:pos + p.size]
            pos += p.size
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, network needs {pos}")

    def topology(self) -> list[dict]:
        return [{"n_in": l.n_in, "n_out": l.n_out, "activation": l.activation,
                 "batch_norm": l.batch_norm} for l in self.layers]

    @classmethod
    def from_topology(cls, topo: list[dict]) -> "DenseNet":
        return cls([DenseLayer(t["n_in"], t["n_out"], t["activation"],
                               t["batch_norm"]) for t in topo])

    # running BN statistics, serialized alongside the weights
    def state_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if layer.batch_norm:
                out += [layer.run_mean, layer.run_var]
        return out


# ---------------------------------------------------------------------------
# loss and optimizer


def _loss_and_grad(pred: np.ndarray, target: np.ndarray, kind: str):
    diff = pred - target
    mse = float(np.mean(diff ** 2))
    if kind == "mse":
        return mse, 2.0 * diff / diff.size
    if kind == "rmse":
        rmse = np.sqrt(mse)
        return rmse, diff / (diff.size * max(rmse, 1e-12))
    raise ValueError(f"unknown loss: {kind!r}")


class Adam:
    """Adam with the standard bias correction (beta1 0.9, beta2 0.999)."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# architectures


def hourglass_widths(n_features: int, latent_dim: int) -> list[int]:
    """Encoder hidden widths: halve from the input until the latent size."""
    widths = []
    w = n_features // 2
    while w > latent_dim:
        widths.append(w)
        w //= 2
    return widths


def build_autoencoder(n_features: int, latent_dim: int,
                      rng: np.random.Generator) -> tuple[DenseNet, int]:
    """Returns (net, n_encoder_layers); encoder ends at the latent layer."""
    if not 1 <= latent_dim <= n_features:
        raise ValueError(f"latent_dim {latent_dim} outside [1, {n_features}]")
    widths = hourglass_widths(n_features, latent_dim)
    layers = []
    prev = n_features
    for w in widths:
        layers.append(DenseLayer(prev, w, "relu", batch_norm=True, rng=rng))
        prev = w
    layers.append(DenseLayer(prev, latent_dim, "linear", batch_norm=False, rng=rng))
    n_encoder = len(layers)
    prev = latent_dim
    for w in reversed(widths):
        layers.append(DenseLayer(prev, w, "relu", batch_norm=True, rng=rng))
        prev = w
    layers.append(DenseLayer(prev, n_features, "linear", batch_norm=False, rng=rng))
    return DenseNet(layers), n_encoder


CLASSIFIER_HIDDEN = (64, 32)


def build_classifier(latent_dim: int, rng: np.random.Generator,
                     hidden=CLASSIFIER_HIDDEN) -> DenseNet:
    layers = []
    prev = latent_dim
    for w in hidden:
        layers.append(DenseLayer(prev, w, "relu", batch_norm=True, rng=rng))
        prev = w
    layers.append(DenseLayer(prev, 1, "linear", batch_norm=False, rng=rng))
    return DenseNet(layers)


# ---------------------------------------------------------------------------
# training


def _train_net(net: DenseNet, X: np.ndarray, Y: np.ndarray, params: TrainParams,
               rng: np.random.Generator, loss: str, augment=None) -> list[float]:
    n = X.shape[0]
    bs = min(params.batch_size, n)
    adam = Adam(net.params(), params.learning_rate)
    trajectory = []
    for epoch in range(params.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            xb = X[idx]
            if augment is not None:
                xb = augment(xb, rng)
            pred, caches = net.forward(xb, training=True, want_cache=True)
            lval, dpred = _loss_and_grad(pred, Y[idx], loss)
            if not np.isfinite(lval):
                raise NumericalError("training diverged", epoch=epoch,
                                     learning_rate=params.learning_rate, loss=loss)
            grads = net.backward(dpred, caches)
            adam.step(grads)
            total += lval
            batches += 1
        trajectory.append(total / batches)
    return trajectory


def _block_dropout_augment(n_variables: int, block: int, params: TrainParams):
    def augment(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        xb = xb + params.noise_std * rng.standard_normal(xb.shape)
        drop = rng.random(xb.shape[0]) < params.dropout_rate
        which = rng.integers(0, n_variables, size=xb.shape[0])
        for r in np.flatnonzero(drop):
            xb[r, which[r] * block:(which[r] + 1) * block] = 0.0
        return xb
    return augment


@dataclass
class AutoencoderModel:
    encoder: DenseNet
    decoder: DenseNet
    latent_dim: int
    trajectory: list[float] = field(repr=False, default_factory=list)
    final_loss: float = float("nan")

    def encode(self, X: np.ndarray) -> np.ndarray:
        return self.encoder.forward(np.asarray(X, dtype=np.float64))

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encode(X))


def train_autoencoder(X: np.ndarray, latent_dim: int, n_variables: int,
                      params: TrainParams, seed: int) -> AutoencoderModel:
    """Denoising autoencoder on feature rows grouped into variable blocks.

    X is [n_samples, n_features] with n_features divisible by
    n_variables; dropout zeroes one variable's whole block per
    corrupted sample. Raises NumericalError when the loss goes
    non-finite, reporting epoch and learning rate.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"X must be [n>=2, features], got {X.shape}")
    if X.shape[1] % n_variables != 0:
        raise ValueError(
            f"feature count {X.shape[1]} not divisible into {n_variables} variable blocks")
    rng = np.random.default_rng(seed)
    net, n_encoder = build_autoencoder(X.shape[1], latent_dim, rng)
    augment = _block_dropout_augment(n_variables, X.shape[1] // n_variables, params)
    trajectory = _train_net(net, X, X, params, rng, "mse", augment)
    clean = net.forward(X)
    final = float(np.mean((clean - X) ** 2))
    return AutoencoderModel(encoder=DenseNet(net.layers[:n_encoder]),
                            decoder=DenseNet(net.layers[n_encoder:]),
                            latent_dim=latent_dim, trajectory=trajectory,
                            final_loss=final)


@dataclass
class ClassifierModel:
    net: DenseNet
    trajectory: list[float] = field(repr=False, default_factory=list)
    final_rmse: float = float("nan")

    def predict(self, Z: np.ndarray) -> np.ndarray:
        out = self.net.forward(np.asarray(Z, dtype=np.float64))
        return out[:, 0]


def train_classifier(Z: np.ndarray, y: np.ndarray, params: TrainParams,
                     seed: int) -> ClassifierModel:
    """RMSE-trained head from latent codes to a scalar suitability score."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise ValueError(f"bad shapes: Z {Z.shape}, y {y.shape}")
    rng = np.random.default_rng(seed)
    net = build_classifier(Z.shape[1], rng)
    trajectory = _train_net(net, Z, y[:, None], params, rng, "rmse")
    pred = net.forward(Z)[:, 0]
    final = float(np.sqrt(np.mean((pred - y) ** 2)))
    return ClassifierModel(net=net, trajectory=trajectory, final_rmse=final)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int


def _relu_signature(net: DenseNet, caches: list[dict]) -> bytes:
    bits = []
    for layer, cache in zip(net.layers, caches):
        if layer.activation == "relu":
            bits.append((cache["u"] > 0.0).ravel())
    if not bits:
        return b""
    return np.packbits(np.concatenate(bits)).tobytes()


def gradient_check(net: DenseNet, X: np.ndarray, Y: np.ndarray,
                   loss: str = "mse", step: float = 1e-3) -> GradCheckResult:
    """Backprop gradients vs central finite differences, all parameters.

    Batch norm runs frozen (running statistics) so the loss is a fixed
    differentiable function of the weights. Parameters whose +-step
    evaluations land on different ReLU activation patterns are excluded:
    finite differences are invalid across the kink. With continuous
    random inputs exclusions are rare and counted in the result.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)

    def eval_loss():
        pred, caches = net.forward(X, training=True, frozen_bn=True, want_cache=True)
        lval, _ = _loss_and_grad(pred, Y, loss)
        return lval, _relu_signature(net, caches)

    pred, caches = net.forward(X, training=True, frozen_bn=True, want_cache=True)
    _, dpred = _loss_and_grad(pred, Y, loss)
    analytic = np.concatenate([g.ravel() for g in net.backward(dpred, caches)])

    theta = net.get_flat()
    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    work = theta.copy()
    for i in range(theta.size):
        work[i] = theta[i] + step
        net.set_flat(work)
        lp, sig_p = eval_loss()
        work[i] = theta[i] - step
        net.set_flat(work)
        lm, sig_m = eval_loss()
        work[i] = theta[i]
        if sig_p != sig_m:
            n_excluded += 1
            continue
        fd = (lp - lm) / (2.0 * step)
        denom = max(abs(fd), abs(analytic[i]))
        err = abs(fd - analytic[i])
        rel = err if denom < 1e-10 else err / denom
        max_rel = max(max_rel, rel)
        n_checked += 1
    net.set_flat(theta)
    return GradCheckResult(max_rel_error=max_rel, n_checked=n_checked,
                          n_excluded=n_excluded)
