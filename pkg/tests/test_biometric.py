import stat
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demorph.biometric import (Comparator, Embedding, ExternalComparator, Status,
                               ToyComparator, embed_toy, get_comparator, is_match,
                               similarity)
from demorph.errors import ConfigError, DimensionError
from demorph.imaging import IdentityParams, generate_dataset, render_bonafide

from oracles import dot_loop


def face(seed, variation=0, res=64):
    return render_bonafide(IdentityParams.from_seed(seed), variation, res)


def random_embedding(rng, dim=64):
    v = rng.standard_normal(dim)
    return Embedding(v / np.linalg.norm(v))


def test_embed_toy_deterministic_unit_norm():
    img = face(3)
    a, b = embed_toy(img), embed_toy(img)
    assert np.array_equal(a.vector, b.vector)
    assert np.linalg.norm(a.vector) == pytest.approx(1.0, abs=1e-12)
    assert len(a) == 64


def test_constant_image_maps_to_canonical_vector():
    e1 = embed_toy(np.full((3, 32, 32), 0.3))
    e2 = embed_toy(np.full((3, 64, 64), 0.9))
    assert np.array_equal(e1.vector, e2.vector)
    assert np.linalg.norm(e1.vector) == 1.0


def test_self_similarity_is_one():
    e = embed_toy(face(5))
    assert similarity(e, e) == pytest.approx(1.0, abs=1e-12)
    assert similarity(e, Embedding(-e.vector)) == pytest.approx(-1.0, abs=1e-12)


def test_similarity_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = random_embedding(rng), random_embedding(rng)
    assert similarity(a, b) == pytest.approx(dot_loop(a.vector, b.vector), abs=1e-12)


def test_similarity_length_mismatch():
    with pytest.raises(DimensionError):
        similarity(Embedding(np.ones(4) / 2), Embedding(np.ones(9) / 3))


def test_embedding_must_be_unit():
    with pytest.raises(ValueError):
        Embedding(np.ones(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_similarity_symmetric_exactly(seed):
    rng = np.random.default_rng(seed)
    a, b = random_embedding(rng), random_embedding(rng)
    assert similarity(a, b) == similarity(b, a)


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.1, 0.1), st.integers(0, 50))
def test_toy_embedding_shift_invariant(c, seed):
    img = face(seed, res=32) * 0.8 + 0.1
    base = embed_toy(img).vector
    shifted = embed_toy(img + c).vector
    assert np.max(np.abs(base - shifted)) < 1e-6


def test_is_match_same_image():
    cmp = ToyComparator()
    img = face(1)
    result, ok = is_match(cmp, img, img, 0.4)
    assert ok and result.status is Status.FOUND
    assert result.similarity == pytest.approx(1.0, abs=1e-12)


def test_distinct_identities_non_match():
    _, ok = is_match(ToyComparator(), face(7), face(8), 0.4)
    assert not ok


def test_is_match_strict_threshold():
    cmp = ToyComparator()
    a, b = face(1), face(1, variation=2)
    result, _ = is_match(cmp, a, b, 0.4)
    _, at_sim = is_match(cmp, a, b, result.similarity)
    assert not at_sim


def test_is_match_tau_domain():
    with pytest.raises(ConfigError):
        is_match(ToyComparator(), face(1), face(1), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(-0.99, 0.99), st.floats(0, 1))
def test_threshold_monotonicity(seed, tau, frac):
    cmp = ToyComparator()
    a, b = face(seed, res=32), face(seed + 1, res=32)
    lower = -0.999 + frac * (tau + 0.999)
    if is_match(cmp, a, b, tau)[1]:
        assert is_match(cmp, a, b, lower)[1]


def test_morphs_match_both_bonafides():
    # 100 generated triples: 10 datasets of 5 identities -> 10 morphs each
    hits = total = 0
    cmp = ToyComparator()
    for seed in range(10):
        for s in generate_dataset(5, 1, [0.5], 64, seed=100 + seed):
            total += 1
            hits += is_match(cmp, s.morph, s.bonafide1)[1] and is_match(cmp, s.morph, s.bonafide2)[1]
    assert total == 100
    assert hits / total >= 0.95


class Blind(Comparator):
    name = "blind"

    def embed(self, image):
        return None


def test_not_found_is_non_match():
    result, ok = is_match(Blind(), face(1), face(1))
    assert not ok and result.status is Status.NOT_FOUND and result.similarity is None


@pytest.fixture
def embed_script(tmp_path):
    script = tmp_path / "embed.py"
    script.write_text(
        "import sys\n"
        "from PIL import Image\n"
        "import numpy as np\n"
        "a = np.asarray(Image.open(sys.argv[1]).convert('L'), dtype=float)\n"
        "if a.std() == 0: sys.exit(1)\n"
        "v = a[::8, ::8].ravel(); v = v - v.mean()\n"
        "print(' '.join(repr(float(x)) for x in v))\n")
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return f"{sys.executable} {script}"


def test_external_comparator_protocol(embed_script):
    cmp = get_comparator("external", command=embed_script)
    assert isinstance(cmp, ExternalComparator)
    img = face(2, res=32)
    result, ok = is_match(cmp, img, img)
    assert ok and result.similarity == pytest.approx(1.0, abs=1e-9)
    # nonzero exit -> not found
    result, ok = is_match(cmp, np.full((3, 32, 32), 0.5), img)
    assert not ok and result.status is Status.NOT_FOUND


def test_unknown_comparator():
    with pytest.raises(ConfigError):
        get_comparator("adaface")
