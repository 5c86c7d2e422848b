"""Evaluation protocols: match accuracy, restoration accuracy, component leakage, IQA."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.signal import convolve2d

from .biometric import DEFAULT_TAU, ToyComparator, embed_toy, similarity
from .errors import DimensionError, MetricError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# -- biometric protocols -----------------------------------------------------

def _embed_all(comparator, images):
    return [comparator.embed(im) for im in images]


def match_accuracy(pairs, comparator=None, tau=DEFAULT_TAU, exclude_not_found=False):
    """Fraction of pairs whose similarity exceeds ``tau``.

    Pairs where either face is not found count as failures, or are dropped
    from the denominator when ``exclude_not_found`` is set.
    """
    comparator = comparator or ToyComparator()
    pairs = list(pairs)
    if not pairs:
        raise MetricError("match accuracy of an empty pair list is undefined")
    hits = total = 0
    for a, b in pairs:
        result = comparator.compare(a, b)
        if not result.found:
            if exclude_not_found:
                continue
            total += 1
            continue
        total += 1
        hits += result.similarity > tau
    if total == 0:
        raise MetricError("no pairs left after removing not-found faces")
    return hits / total


@dataclass
class RestorationRecord:
    pairing: str
    similarities: dict
    correct: tuple
    not_found: tuple = ()


def _sim_or_none(e1, e2):
    if e1 is None or e2 is None:
        return None
    return similarity(e1, e2)


def restoration_accuracy(results, comparator=None, tau=DEFAULT_TAU):
    """Per-subject restoration accuracy over ``(O1, O2, B1, B2)`` tuples.

    Outputs are assigned to bonafides by whichever pairing (natural or
    swapped) has the larger total similarity; ties go to the pairing with the
    larger worst-case similarity.  Subject ``s`` is restored when its assigned
    output matches ``B_s`` and does not match the other bonafide.

    Returns ``(subject1_accuracy, subject2_accuracy, records)``.
    """
    comparator = comparator or ToyComparator()
    results = list(results)
    if not results:
        raise MetricError("restoration accuracy of an empty result list is undefined")
    records = []
    for o1, o2, b1, b2 in results:
        eo1, eo2, eb1, eb2 = _embed_all(comparator, (o1, o2, b1, b2))
        sims = {
            "o1_b1": _sim_or_none(eo1, eb1), "o1_b2": _sim_or_none(eo1, eb2),
            "o2_b1": _sim_or_none(eo2, eb1), "o2_b2": _sim_or_none(eo2, eb2),
        }
        score = {k: (-1.0 if v is None else v) for k, v in sims.items()}
        natural = (score["o1_b1"] + score["o2_b2"], min(score["o1_b1"], score["o2_b2"]))
        swapped = (score["o1_b2"] + score["o2_b1"], min(score["o1_b2"], score["o2_b1"]))
        pairing = "natural" if natural >= swapped else "swapped"
        assigned = ("o1", "o2") if pairing == "natural" else ("o2", "o1")
        correct = []
        for subject, out in enumerate(assigned, start=1):
            own = sims[f"{out}_b{subject}"]
            other = sims[f"{out}_b{3 - subject}"]
            ok = own is not None and other is not None and own > tau and not other > tau
            correct.append(bool(ok))
        missing = tuple(name for name, e in zip(("o1", "o2", "b1", "b2"), (eo1, eo2, eb1, eb2))
                        if e is None)
        records.append(RestorationRecord(pairing, sims, tuple(correct), missing))
    n = len(records)
    acc1 = sum(r.correct[0] for r in records) / n
    acc2 = sum(r.correct[1] for r in records) / n
    return acc1, acc2, records


@dataclass
class LeakageReport:
    rates: list
    rates_na_removed: list
    reconstruction_rate: float
    reconstruction_rate_na_removed: float
    not_found: int = 0
    similarities: list = field(default_factory=list, repr=False)


def _rate(flags, na_removed):
    valid = [f for f in flags if f is not None] if na_removed else flags
    if not valid:
        return float("nan")
    return sum(bool(f) for f in valid) / len(valid)


@torch.no_grad()
def component_leakage(dec, mer, images, comparator=None, tau=DEFAULT_TAU, head=0):
    """Identity leakage of each component when replicated k times into the merger.

    Also returns the control: the match rate of the full reconstruction from
    the true component set.
    """
    comparator = comparator or ToyComparator()
    from .training import to_batch

    dec.eval()
    mer.eval()
    batch = to_batch(images)
    components = dec(batch)
    k = len(components)
    originals = _embed_all(comparator, images)

    def flags_for(outputs):
        flags, sims = [], []
        for orig, out in zip(originals, outputs):
            emb = comparator.embed(out.double().numpy())
            s = _sim_or_none(orig, emb)
            sims.append(s)
            flags.append(None if s is None else s > tau)
        return flags, sims

    recon_flags, _ = flags_for(mer(components, head=head))
    rates, rates_na, all_sims = [], [], []
    for i in range(k):
        flags, sims = flags_for(mer([components[i]] * k, head=head))
        # not-found counts as a non-leak in the raw rate
        rates.append(_rate([bool(f) for f in flags], False))
        rates_na.append(_rate(flags, True))
        all_sims.append(sims)
    not_found = sum(f is None for f in recon_flags)
    return LeakageReport(rates, rates_na, _rate([bool(f) for f in recon_flags], False),
                         _rate(recon_flags, True), not_found, all_sims)


# -- image quality ------------------------------------------------------------

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return a, b


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range=1.0):
    """Mean SSIM over all valid 11x11 Gaussian windows and channels."""
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(f"images smaller than the {SSIM_WINDOW}px SSIM window")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    maps = []
    for x, y in zip(a, b):
        # the window is symmetric, so convolution equals correlation
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        sxx = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
        syy = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
        sxy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return float(np.mean(maps))


def psnr(a, b):
    """PSNR in dB for unit-range images, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _sqrt_psd(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2):
    """Frechet distance between two Gaussians.

    The trace of ``(cov1 cov2)^(1/2)`` is taken from the eigenvalues of the
    symmetric matrix ``cov1^(1/2) cov2 cov1^(1/2)``, which shares the
    spectrum of ``cov1 cov2``; negative eigenvalues are clamped to zero.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    cov1, cov2 = np.asarray(cov1, np.float64), np.asarray(cov2, np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise DimensionError("Gaussian parameters have mismatched dimensions")
    root1 = _sqrt_psd(cov1)
    middle = root1 @ cov2 @ root1
    eig = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)


def fid_from_features(feats_a, feats_b):
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    dim = fa.shape[1]
    for name, f in (("first", fa), ("second", fb)):
        if f.shape[0] < dim + 1:
            raise MetricError(
                f"{name} set has {f.shape[0]} samples; need at least {dim + 1} for {dim}-d features")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False),
                            fb.mean(0), np.cov(fb, rowvar=False))


def toy_fid_features(image):
    return embed_toy(image).vector


def fid(set_a, set_b, embedder=toy_fid_features):
    """FID over an embedder's features (the toy embedder by default).

    Values depend on the embedder and are not comparable across embedders.
    """
    fa = np.stack([embedder(im) for im in set_a])
    fb = np.stack([embedder(im) for im in set_b])
    return fid_from_features(fa, fb)


@dataclass
class IqaReport:
    fid: float | None
    ssim: float
    psnr: float
    embedder: str = "toy"


def iqa(references, reconstructions, embedder=toy_fid_features, embedder_name="toy"):
    """Mean SSIM/PSNR over aligned pairs, plus FID when the sets are large enough."""
    references, reconstructions = list(references), list(reconstructions)
    if len(references) != len(reconstructions) or not references:
        raise MetricError("IQA needs two equally sized, non-empty image lists")
    s = float(np.mean([ssim(a, b) for a, b in zip(references, reconstructions)]))
    p = float(np.mean([psnr(a, b) for a, b in zip(references, reconstructions)]))
    try:
        f = fid(references, reconstructions, embedder)
    except MetricError:
        f = None
    return IqaReport(f, s, p, embedder_name)
