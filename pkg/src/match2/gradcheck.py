"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .autograd import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(floor, |a| + |n|)``, elementwise."""
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3, coords=None, kinked: Optional[set] = None) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h at each requested flat coordinate of ``x``.

    When a set is passed as ``kinked``, the flat indices whose two probes
    cross a kink of some piecewise op are added to it.
    """
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        base = None
        if kinked is not None:
            with ops.record_kinks() as base:
                f()
        for i in coords:
            orig = flat[i]
            with ops.record_kinks() as up_log:
                flat[i] = orig + h
                up = float(f().data)
            with ops.record_kinks() as down_log:
                flat[i] = orig - h
                down = float(f().data)
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
            if kinked is not None and not (_same_branches(base, up_log) and _same_branches(base, down_log)):
                kinked.add(i)
    return out.reshape(x.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, coords=None, skip_kinks: bool = False) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic.  ``x`` is
    perturbed in place, so it should be float64 for a tight comparison.
    With ``skip_kinks`` coordinates whose probes straddle a kink are left out.
    """
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    kinked = set() if skip_kinks else None
    numeric = numeric_grad(lambda: f(x), x, h, coords, kinked)
    err = relative_error(analytic, numeric).reshape(-1)
    keep = list(range(err.size)) if coords is None else list(coords)
    if kinked:
        keep = [i for i in keep if i not in kinked]
    err = err[keep]
    return float(err.max()) if err.size else 0.0


def sample_coords(size: int, limit: Optional[int], rng: np.random.Generator):
    if limit is None or size <= limit:
        return list(range(size))
    return sorted(rng.choice(size, size=limit, replace=False).tolist())


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = True,
    probes: Optional[Dict[str, Tuple[int, int]]] = None,
) -> Dict[str, float]:
    """Per-parameter max relative error for a closure over a model.

    With ``max_coords`` each parameter is probed on that many randomly chosen
    coordinates (all of them when the parameter is smaller).  When
    ``skip_kinks``, coordinates whose probes straddle a kink are left out;
    pass a dict as ``probes`` to receive (probed, left out) counts per
    parameter.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    report = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        coords = sample_coords(p.size, max_coords, rng)
        kinked = set() if skip_kinks else None
        numeric = numeric_grad(loss_fn, p, h, coords, kinked)
        full = relative_error(analytic.reshape(-1), numeric.reshape(-1))
        keep = [i for i in coords if not (kinked and i in kinked)]
        err = full[keep]
        report[name] = float(err.max()) if err.size else 0.0
        if probes is not None:
            probes[name] = (len(coords), len(coords) - len(keep))
    return report


# ---------------------------------------------------------------------------
# the suite behind ``match2 gradcheck``

SUITE_MODULES = ("encoder", "pattern", "gate", "head", "model")


def _tiny_batch(rng: np.random.Generator, size: int = 2, m: int = 4, w: int = 6):
    from .text import DatasetRecord, build_vocab, encode_batch

    words = [f"t{i}" for i in range(12)]

    def text(k):
        return " ".join(rng.choice(words, size=k))

    # one full-length and one shorter item so padded cells are exercised
    recs = [DatasetRecord(text(m), text(m), text(w), 1), DatasetRecord(text(m - 1), text(m - 2), text(w - 2), 0)][:size]
    vocab = build_vocab(words)
    return vocab, encode_batch(recs, vocab, m, w)


def _tiny_config(vocab_size: int, ablation: str = "full", similarity: str = "dot"):
    from .encoder import EncoderConfig
    from .model import Match2Config

    enc = EncoderConfig(vocab_size, layers=2, hidden=16, heads=2, max_position=16, init_std=0.1)
    return Match2Config(enc, similarity=similarity, ablation=ablation, init_std=0.3, max_question=4, max_answer=6)


def _unit_embeddings(enc, rng: np.random.Generator):
    # Unit-scale embeddings keep layer-norm inputs far larger than h, so the
    # central difference sees a smooth function rather than layer-norm curvature.
    for emb in (enc.token, enc.position, enc.segment):
        emb.table.data = rng.normal(size=emb.table.shape)
    return enc


def _projector(rng: np.random.Generator):
    cache: Dict[tuple, np.ndarray] = {}

    def project(t: Tensor) -> Tensor:
        if t.shape not in cache:
            cache[t.shape] = rng.normal(size=t.shape)
        return (t * cache[t.shape]).sum()

    return project


def run_suite(module: str = "all", h: float = 1e-3, max_coords: Optional[int] = 24, seed: int = 0,
              probes: Optional[Dict[str, Tuple[int, int]]] = None) -> Dict[str, float]:
    """Max relative error per ``<module>/<parameter>``, everything in float64.

    Each check reduces the component's output to a scalar with a fixed random
    projection, then compares backprop against central differences on (up
    to ``max_coords`` randomly chosen coordinates of) every parameter.
    """
    from . import model as mm
    from .autograd import precision
    from .encoder import StackedEncoder, split_segments
    from .nn import MLPHead
    from .trainer import batch_loss

    names = SUITE_MODULES if module == "all" else (module,)
    unknown = [n for n in names if n not in SUITE_MODULES]
    if unknown:
        from .errors import ConfigError

        raise ConfigError(f"unknown gradcheck module {unknown[0]!r}; expected 'all' or one of {SUITE_MODULES}")
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    probes = {} if probes is None else probes
    with precision(np.float64):
        vocab, batch = _tiny_batch(rng)
        for name in names:
            project = _projector(rng)
            if name == "encoder":
                enc = _unit_embeddings(StackedEncoder(_tiny_config(len(vocab)).encoder, rng).astype(np.float64), rng)

                def loss(enc=enc):
                    out = enc(batch.ua)
                    total = project(out.pooled)
                    for x in split_segments(out)[1]:
                        total = total + project(x)
                    return total

                params = enc.named_parameters()
            elif name == "pattern":
                cfg = _tiny_config(len(vocab))
                enc = _unit_embeddings(StackedEncoder(cfg.encoder, rng).astype(np.float64), rng)
                comp = mm.PatternCompressor(2, 16, rng, 0.3).astype(np.float64)
                with no_grad():
                    ua, aa = enc(batch.ua), enc(batch.aa)
                su, sa = split_segments(ua), split_segments(aa)
                feats = [Tensor(x.data.copy(), requires_grad=True) for x in su[0] + su[1] + sa[0] + sa[1]]
                for fn in mm.SIMILARITY_FUNCTIONS:
                    p2 = _projector(rng)

                    def loss(fn=fn, p2=p2):
                        pu = mm.matching_pattern(feats[0:2], feats[2:4], su[2], su[3])
                        pa = mm.matching_pattern(feats[4:6], feats[6:8], sa[2], sa[3])
                        ps = mm.pattern_similarity(pu, pa, fn)
                        return p2(ps.tensor) + p2(mm.compress(ps, comp, "train"))

                    inputs = {f"{fn}:features{i}": t for i, t in enumerate(feats)}
                    inputs.update({f"{fn}:{k}": v for k, v in comp.named_parameters().items()})
                    found = {}
                    for k, v in check_parameters(loss, inputs, h, max_coords, rng, probes=found).items():
                        report[f"pattern/{k}"] = v
                        probes[f"pattern/{k}"] = found[k]
                continue
            elif name == "gate":
                gate = mm.Gate(16, rng, 0.5).astype(np.float64)
                v_q = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
                v_a = Tensor(rng.normal(size=(2, 16)), requires_grad=True)

                def loss(gate=gate):
                    return project(mm.gate_fuse(v_q, v_a, gate))

                params = dict(gate.named_parameters(), v_q=v_q, v_a=v_a)
            elif name == "head":
                head = MLPHead(16, 16, rng, 0.5).astype(np.float64)
                v = Tensor(rng.normal(size=(2, 16)), requires_grad=True)

                def loss(head=head):
                    return project(head(v))

                params = dict(head.named_parameters(), v=v)
            else:
                net = mm.Match2(_tiny_config(len(vocab)), rng).astype(np.float64)
                _unit_embeddings(net.qq_encoder, rng)
                _unit_embeddings(net.qa_encoder, rng)

                def loss(net=net):
                    return batch_loss(net(batch, mode="train"), batch)

                params = net.named_parameters()
            found = {}
            for k, v in check_parameters(loss, params, h, max_coords, rng, probes=found).items():
                report[f"{name}/{k}"] = v
                probes[f"{name}/{k}"] = found[k]
    return report
