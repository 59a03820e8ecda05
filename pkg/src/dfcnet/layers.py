"""Named parameter storage and the small layer helpers built on it."""
import numpy as np

from . import tensor as T


class ParameterSet:
    """Ordered named parameters plus batch-norm running statistics.

    Parameters are created in call order from a single generator, so the same
    seed and the same construction sequence give bit-identical values.
    """

    def __init__(self, seed=0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params = {}
        self.stats = {}

    def _add(self, name, data):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = T.Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def conv(self, name, out_ch, in_ch, k, bias=True):
        fan_in = in_ch * k * k
        w = self.rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)
        self._add(f"{name}/weight", w)
        if bias:
            self._add(f"{name}/bias", np.zeros(out_ch))

    def norm(self, name, channels):
        self._add(f"{name}/gamma", np.ones(channels))
        self._add(f"{name}/beta", np.zeros(channels))
        self.stats[name] = T.RunningStats(channels, dtype=self.dtype)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def count(self):
        return sum(p.size for p in self.params.values())

    def state_arrays(self):
        """Flat name -> array mapping of parameters and running statistics."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.stats.items():
            out[f"{name}/running_mean"] = st.mean
            out[f"{name}/running_var"] = st.var
        return out

    def load_arrays(self, arrays):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in arrays.items():
            if expected[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {expected[name].shape}")
            expected[name][...] = arr


def conv(params, name, x, stride=1, padding=None):
    w = params[f"{name}/weight"]
    b = params.params.get(f"{name}/bias")
    if padding is None:
        padding = w.shape[2] // 2
    return T.conv2d(x, w, b, stride=stride, padding=padding)


def norm(params, name, x, training):
    return T.batch_norm(x, params[f"{name}/gamma"], params[f"{name}/beta"], params.stats[name], training)


def preact_conv(params, name, x, training):
    """norm -> relu -> conv, the DenseNet layer-unit ordering."""
    h = T.relu(norm(params, f"{name}/norm", x, training))
    return conv(params, f"{name}/conv", h)


def add_preact_conv(params, name, in_ch, out_ch, k):
    params.norm(f"{name}/norm", in_ch)
    params.conv(f"{name}/conv", out_ch, in_ch, k)
