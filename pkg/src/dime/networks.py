"""Function approximators: the denoiser (score network), the twin critic
with batch renormalization, and the binary checkpoint format.

The critic is built for target-network-free training: current and next
transitions are pushed through the same forward pass as one normalization
batch, and the next-branch outputs are detached from the graph.
"""

import struct

import numpy as np

from dime import autodiff as ad
from dime.autodiff import Tensor


class Linear:
    """Affine map with Glorot-uniform weights, or zeros when requested."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_arrays(self, prefix: str) -> dict:
        return {f"{prefix}.weight": self.weight.data, f"{prefix}.bias": self.bias.data}

    def parameters(self) -> list:
        return [self.weight, self.bias]


def fourier_time_features(n_steps: int, n_frequencies: int = 8) -> np.ndarray:
    """Sin/cos features of the normalized step index, one row per step.

    Frequencies are geometrically spaced over [1, 1000] radians so nearby
    steps stay distinguishable at every chain length.
    """
    freqs = np.geomspace(1.0, 1000.0, n_frequencies)
    tau = np.arange(n_steps)[:, None] / n_steps
    angles = tau * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class ScoreNetwork:
    """Denoiser f(state, noisy action, step) -> estimated score.

    The step index is embedded through fixed Fourier features and a
    two-layer net, then concatenated with state and action at the trunk
    input.  The trunk is three affine layers with gelu between them; the
    last layer starts at zero so the untrained sampler reduces to the plain
    reverse drift.
    """

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        n_steps: int,
        hidden: int = 128,
        time_width: int = 128,
        n_frequencies: int = 8,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.n_steps = n_steps
        self._features = fourier_time_features(n_steps, n_frequencies)
        self.time_in = Linear(2 * n_frequencies, time_width, rng)
        self.time_out = Linear(time_width, time_width, rng)
        self.fc1 = Linear(obs_dim + act_dim, hidden, rng)
        self.time_proj = Linear(time_width, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, act_dim, rng, zero_init=True)
        # a step's first-layer contribution depends only on the step index
        # and the time-net parameters; cache it per (step, grad mode) as a
        # single row and drop the cache via mark_updated() whenever those
        # parameters change
        self._emb_cache: dict = {}
        self._version = 0
        self._emb_version = -1

    def mark_updated(self) -> None:
        self._version += 1

    def _embedding(self, n: int) -> Tensor:
        if self._emb_version != self._version:
            self._emb_cache.clear()
            self._emb_version = self._version
        key = (n, ad._grad_enabled)
        emb = self._emb_cache.get(key)
        if emb is None:
            feats = Tensor._make(self._features[n : n + 1], (), None)
            emb = self.time_proj(self.time_out(self.time_in(feats).gelu()))
            self._emb_cache[key] = emb
        return emb

    def __call__(self, obs: Tensor, action: Tensor, n: int) -> Tensor:
        if not 0 <= n < self.n_steps:
            raise ValueError(f"step index {n} outside [0, {self.n_steps})")
        batch = obs.data.shape[0]
        emb = self._embedding(n)
        emb = ad.broadcast_to(emb, (batch, emb.data.shape[1]))
        x = ad.concatenate([obs, action], axis=1)
        h = (self.fc1(x) + emb).gelu()
        h = self.fc2(h).gelu()
        return self.fc3(h)

    def parameters(self) -> list:
        layers = [self.time_in, self.time_out, self.time_proj, self.fc1, self.fc2, self.fc3]
        return [p for layer in layers for p in layer.parameters()]

    def named_arrays(self, prefix: str = "score") -> dict:
        out = {}
        for name, layer in [
            ("time_in", self.time_in),
            ("time_out", self.time_out),
            ("time_proj", self.time_proj),
            ("fc1", self.fc1),
            ("fc2", self.fc2),
            ("fc3", self.fc3),
        ]:
            out.update(layer.named_arrays(f"{prefix}.{name}"))
        return out


class BatchRenorm:
    """Batch renormalization over the leading axis.

    Training mode normalizes by batch statistics, then applies the
    correction factors r = clip(sigma_batch / sigma_running) and
    d = clip((mu_batch - mu_running) / sigma_running) as constants, which
    keeps train-time outputs consistent with the running statistics used
    at evaluation.  Needs at least two rows to estimate a variance.
    """

    def __init__(
        self,
        n_features: int,
        momentum: float = 0.99,
        r_max: float = 3.0,
        d_max: float = 5.0,
        eps: float = 1e-5,
    ):
        self.gamma = Tensor(np.ones(n_features), requires_grad=True)
        self.beta = Tensor(np.zeros(n_features), requires_grad=True)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.r_max = r_max
        self.d_max = d_max
        self.eps = eps

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            if x.data.shape[0] < 2:
                raise ValueError(f"batch renorm needs >= 2 rows in training mode, got {x.data.shape[0]}")
            mu_b = x.mean(axis=0, keepdims=True)
            var_b = (x - mu_b).square().mean(axis=0, keepdims=True)
            sigma_b = (var_b + self.eps).sqrt()
            sigma_run = np.sqrt(self.running_var + self.eps)
            r = np.clip(sigma_b.data / sigma_run, 1.0 / self.r_max, self.r_max)
            d = np.clip((mu_b.data - self.running_mean) / sigma_run, -self.d_max, self.d_max)
            y = (x - mu_b) / sigma_b * Tensor._make(r, (), None) + Tensor._make(d, (), None)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu_b.data[0]
            self.running_var = m * self.running_var + (1.0 - m) * var_b.data[0]
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            y = x * Tensor._make(scale, (), None) - Tensor._make(self.running_mean * scale, (), None)
        return y * self.gamma + self.beta

    def parameters(self) -> list:
        return [self.gamma, self.beta]

    def named_arrays(self, prefix: str) -> dict:
        return {
            f"{prefix}.gamma": self.gamma.data,
            f"{prefix}.beta": self.beta.data,
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }

    def load_buffers(self, prefix: str, arrays: dict) -> None:
        self.running_mean = arrays[f"{prefix}.running_mean"].copy()
        self.running_var = arrays[f"{prefix}.running_var"].copy()


class CriticHead:
    """One value head: two renormalized hidden layers, then output logits."""

    def __init__(self, n_in: int, width: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, width, rng)
        self.bn1 = BatchRenorm(width)
        self.fc2 = Linear(width, width, rng)
        self.bn2 = BatchRenorm(width)
        self.out = Linear(width, n_out, rng)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = self.bn1(self.fc1(x), train).gelu()
        h = self.bn2(self.fc2(h), train).gelu()
        return self.out(h)

    def parameters(self) -> list:
        return (
            self.fc1.parameters()
            + self.bn1.parameters()
            + self.fc2.parameters()
            + self.bn2.parameters()
            + self.out.parameters()
        )

    def named_arrays(self, prefix: str) -> dict:
        out = {}
        out.update(self.fc1.named_arrays(f"{prefix}.fc1"))
        out.update(self.bn1.named_arrays(f"{prefix}.bn1"))
        out.update(self.fc2.named_arrays(f"{prefix}.fc2"))
        out.update(self.bn2.named_arrays(f"{prefix}.bn2"))
        out.update(self.out.named_arrays(f"{prefix}.out"))
        return out


class CriticNetwork:
    """Twin independently initialized value heads over (state, action).

    ``n_out`` is the number of value bins in distributional mode, or 1 for
    a plain scalar head.
    """

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        width: int = 128,
        n_out: int = 51,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.n_out = n_out
        self.heads = [CriticHead(obs_dim + act_dim, width, n_out, rng) for _ in range(2)]

    def forward(self, obs: Tensor, action: Tensor, train: bool) -> list:
        x = ad.concatenate([obs, action], axis=1)
        return [head(x, train) for head in self.heads]

    def forward_joint(self, obs: Tensor, action: Tensor, next_obs: Tensor, next_action: Tensor) -> tuple:
        """Train-mode pass over current and next pairs as one batch.

        Returns per-head logits for the current pair (in the graph) and for
        the next pair (detached: targets never backpropagate).
        """
        batch = obs.data.shape[0]
        x = ad.concatenate(
            [ad.concatenate([obs, next_obs], axis=0), ad.concatenate([action, next_action], axis=0)],
            axis=1,
        )
        current, nxt = [], []
        for head in self.heads:
            logits = head(x, train=True)
            current.append(logits[:batch])
            nxt.append(ad.stop_gradient(logits[batch:]))
        return current, nxt

    def parameters(self) -> list:
        return [p for head in self.heads for p in head.parameters()]

    def named_arrays(self, prefix: str = "critic") -> dict:
        out = {}
        for i, head in enumerate(self.heads):
            out.update(head.named_arrays(f"{prefix}.head{i}"))
        return out

    def load_buffers(self, prefix: str, arrays: dict) -> None:
        for i, head in enumerate(self.heads):
            head.bn1.load_buffers(f"{prefix}.head{i}.bn1", arrays)
            head.bn2.load_buffers(f"{prefix}.head{i}.bn2", arrays)


class Adam:
    """Standard Adam on the raw parameter arrays."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# --------------------------------------------------------------------------
# Checkpoints: magic, version, then (name, shape, little-endian float64 data)
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DIMECKPT"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n_bytes = 8 * int(np.prod(shape)) if shape else 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise ValueError(f"checkpoint truncated while reading {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return arrays


def load_into(arrays: dict, named_params: dict) -> None:
    """Copy checkpoint arrays into live parameter storage, shape-checked."""
    for name, target in named_params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        src = arrays[name]
        if src.shape != target.shape:
            raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {target.shape}")
        target[...] = src
