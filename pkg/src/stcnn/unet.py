"""3D regression U-Net: a stack of T frames (one channel per frame) to one map."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor


def init_kernel(rng, shape, dtype=np.float64) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class UNet3D:
    """Contracting/expanding 3D CNN with concatenated skip connections.

    Level ``l`` has ``base_channels * 2**l`` channels and two 3^3
    convolution + relu blocks. A final 1x1x1 convolution produces the
    single-channel output with no activation.
    """

    kind = "unet3d"

    def __init__(self, in_channels: int, levels: int = 3, base_channels: int = 8,
                 kernel: int = 3, seed: int = 0, dtype=np.float64):
        if levels < 2:
            raise ValueError(f"levels must be at least 2, got {levels}")
        self.in_channels = in_channels
        self.levels = levels
        self.base_channels = base_channels
        self.kernel = kernel
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        k3 = (kernel,) * 3
        self.params: dict[str, Tensor] = {}

        def conv(name, cin, cout, ksize=k3):
            self.params[name + ".w"] = init_kernel(rng, (cout, cin) + ksize, self.dtype)
            self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

        widths = self.widths
        cin = in_channels
        for lvl, c in enumerate(widths):
            conv(f"enc{lvl}.conv1", cin, c)
            conv(f"enc{lvl}.conv2", c, c)
            cin = c
        for lvl in range(levels - 2, -1, -1):
            conv(f"dec{lvl}.conv1", widths[lvl + 1] + widths[lvl], widths[lvl])
            conv(f"dec{lvl}.conv2", widths[lvl], widths[lvl])
        conv("out", widths[0], 1, (1, 1, 1))
        # the output layer is linear; starting it at zero keeps early steps
        # from driving the relu layers dead
        self.params["out.w"].data[...] = 0.0

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** lvl for lvl in range(self.levels)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _block(self, x, name):
        p = self.params
        x = ad.relu(ad.add_bias(ad.conv3d(x, p[name + ".conv1.w"]), p[name + ".conv1.b"]))
        return ad.relu(ad.add_bias(ad.conv3d(x, p[name + ".conv2.w"]), p[name + ".conv2.b"]))

    def forward(self, frames) -> Tensor:
        """Map ``frames (T, D, H, W)`` to a ``(D, H, W)`` tensor."""
        frames = np.asarray(getattr(frames, "data", frames), dtype=self.dtype)
        if frames.ndim != 4 or frames.shape[0] != self.in_channels:
            raise ad.DimensionError(f"unet: expected ({self.in_channels}, D, H, W) input, "
                                    f"got {frames.shape}")
        spatial = frames.shape[1:]
        step = 2 ** (self.levels - 1)
        extra = [(-n) % step for n in spatial]
        x = Tensor(frames)
        if any(extra):
            x = Tensor(np.pad(frames, [(0, 0)] + [(0, e) for e in extra], mode="edge"))
        skips = []
        for lvl in range(self.levels):
            x = self._block(x, f"enc{lvl}")
            if lvl < self.levels - 1:
                skips.append(x)
                x = ad.maxpool(x, 2)
        for lvl in range(self.levels - 2, -1, -1):
            x = ad.concat_channels([ad.upsample(x, 2), skips[lvl]])
            x = self._block(x, f"dec{lvl}")
        p = self.params
        x = ad.add_bias(ad.conv3d(x, p["out.w"], padding="valid"), p["out.b"])
        if any(extra):
            x = ad.crop(x, spatial)
        return ad.reshape(x, spatial)

    __call__ = forward

    def config(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "levels": self.levels,
                "base_channels": self.base_channels, "kernel": self.kernel, "seed": self.seed}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} vs model {t.shape}")
            t.data[...] = state[k]

    def save(self, path) -> None:
        checkpoint.save(path, self.config(), self.state_dict())

    @classmethod
    def load(cls, path) -> "UNet3D":
        cfg, state = checkpoint.load(path)
        if cfg.get("kind") != cls.kind:
            raise ValueError(f"{path} holds a {cfg.get('kind')!r} checkpoint, not {cls.kind!r}")
        model = cls(int(cfg["in_channels"]), int(cfg["levels"]), int(cfg["base_channels"]),
                    int(cfg["kernel"]), int(cfg["seed"]))
        model.load_state_dict(state)
        return model


def spatial_loss(pred: Tensor, label) -> Tensor:
    return ad.mse_loss(pred, label)
