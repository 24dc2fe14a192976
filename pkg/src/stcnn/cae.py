"""1D convolutional autoencoder refining a single time series."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .unet import init_kernel

ENCODER_KERNELS = (3, 5, 8)
ENCODER_CHANNELS = (8, 16, 32)
MIN_LENGTH = 8


class ConfigurationError(ValueError):
    pass


class TemporalCAE:
    """Encoder: three same-padded conv + relu stages (kernels 3, 5, 8;
    channels 8, 16, 32) with max pooling after the first two. The decoder
    mirrors it: upsample, conv k=8 -> 16, upsample, conv k=5 -> 8, then a
    linear conv k=3 -> 1.
    """

    kind = "cae1d"

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        cin = 1
        for i, (k, c) in enumerate(zip(ENCODER_KERNELS, ENCODER_CHANNELS), start=1):
            self._conv(rng, f"enc{i}", cin, c, k)
            cin = c
        dec_kernels = ENCODER_KERNELS[::-1]
        dec_channels = ENCODER_CHANNELS[-2::-1] + (1,)
        for i, (k, c) in enumerate(zip(dec_kernels, dec_channels), start=1):
            self._conv(rng, f"dec{i}", cin, c, k)
            cin = c

    def _conv(self, rng, name, cin, cout, k):
        self.params[name + ".w"] = init_kernel(rng, (cout, cin, k), self.dtype)
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def architecture(self) -> dict:
        """Kernel sizes and output channels read off the parameter shapes."""
        def stage(prefix):
            ws = [self.params[f"{prefix}{i}.w"].shape for i in (1, 2, 3)]
            return tuple(w[2] for w in ws), tuple(w[0] for w in ws)

        ek, ec = stage("enc")
        dk, dc = stage("dec")
        return {"encoder_kernels": ek, "encoder_channels": ec,
                "decoder_kernels": dk, "decoder_channels": dc, "pool_window": 2}

    def _conv_apply(self, x, name, relu=True):
        x = ad.add_bias(ad.conv1d(x, self.params[name + ".w"]), self.params[name + ".b"])
        return ad.relu(x) if relu else x

    def forward(self, series) -> Tensor:
        """Same-length reconstruction of a 1D series (array or Tensor)."""
        x = ad.as_tensor(series)
        n = x.shape[-1]
        if n < MIN_LENGTH:
            raise ConfigurationError(f"series length {n} is below the minimum of {MIN_LENGTH}")
        x = ad.reshape(x, (1, n))
        extra = (-n) % 4
        if extra:
            x = ad.pad_replicate(x, [extra])
        x = ad.maxpool(self._conv_apply(x, "enc1"), 2)
        x = ad.maxpool(self._conv_apply(x, "enc2"), 2)
        x = self._conv_apply(x, "enc3")
        x = self._conv_apply(ad.upsample(x, 2), "dec1")
        x = self._conv_apply(ad.upsample(x, 2), "dec2")
        x = self._conv_apply(x, "dec3", relu=False)
        if extra:
            x = ad.crop(x, [n])
        return ad.reshape(x, (n,))

    __call__ = forward

    def config(self) -> dict:
        return {"kind": self.kind, "seed": self.seed}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} vs model {t.shape}")
            t.data[...] = state[k]

    def save(self, path) -> None:
        checkpoint.save(path, self.config(), self.state_dict())

    @classmethod
    def load(cls, path) -> "TemporalCAE":
        cfg, state = checkpoint.load(path)
        if cfg.get("kind") != cls.kind:
            raise ValueError(f"{path} holds a {cfg.get('kind')!r} checkpoint, not {cls.kind!r}")
        model = cls(int(cfg["seed"]))
        model.load_state_dict(state)
        return model


def temporal_loss(pred, label) -> Tensor:
    return ad.neg_pearson_loss(pred, label)
