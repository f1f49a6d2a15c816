import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.exceptions import NotFittedError

from rkhs_slam.vocabulary import Vocabulary, bundled_vocabulary, hamming_matrix

descriptor_sets = arrays(np.uint8, st.tuples(st.integers(1, 6), st.just(32)))


def images(seed=0, n_images=6, per_image=150):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, (per_image, 32), dtype=np.uint8) for _ in range(n_images)]


@settings(max_examples=60, deadline=None)
@given(a=descriptor_sets, b=descriptor_sets)
def test_hamming_matches_popcount(a, b):
    expected = np.array([[np.unpackbits(x ^ y).sum() for y in b] for x in a])
    assert np.array_equal(hamming_matrix(a, b), expected)


class TestFit:
    def test_word_count_bounded(self):
        v = Vocabulary(branching=4, depth=2).fit(images())
        assert 1 < v.n_words_ <= 16
        assert np.all(v.idf_ >= 1.0)

    def test_deterministic(self):
        a = Vocabulary(4, 2, random_state=3).fit(images())
        b = Vocabulary(4, 2, random_state=3).fit(images())
        assert np.array_equal(a.centers_, b.centers_)

    def test_leaf_center_quantizes_to_its_word(self):
        v = Vocabulary(4, 2).fit(images())
        for node in v.leaf_nodes_[:5]:
            assert v.quantize(v.centers_[node][None])[0] == v.word_of_node_[node]

    def test_few_unique_descriptors(self):
        d = np.zeros((20, 32), np.uint8)
        d[10:] = 255
        v = Vocabulary(4, 3).fit([d])
        assert v.n_words_ == 2

    def test_empty_input(self):
        with pytest.raises(ValueError):
            Vocabulary().fit([np.zeros((0, 32), np.uint8)])

    def test_bad_params(self):
        with pytest.raises(ValueError):
            Vocabulary(branching=1).fit(images())

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            Vocabulary().transform(images()[0])


class TestTransform:
    def test_weights_are_tf_idf(self):
        v = Vocabulary(4, 2).fit(images())
        d = images(5)[0]
        bow = v.transform(d)
        words = v.quantize(d)
        for w, weight in bow.items():
            assert weight == pytest.approx(np.mean(words == w) * v.idf_[w], rel=1e-12)
        assert list(bow) == sorted(bow)

    def test_empty_descriptors(self):
        v = Vocabulary(4, 2).fit(images())
        assert v.transform(np.zeros((0, 32), np.uint8)) == {}


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        v = Vocabulary(4, 2).fit(images())
        path = tmp_path / "voc.txt"
        v.save(path)
        w = Vocabulary.load(path)
        d = images(9)[0]
        assert w.transform(d) == v.transform(d)
        assert w.get_params()["branching"] == 4

    def test_bad_header(self, tmp_path):
        path = tmp_path / "voc.txt"
        path.write_text("hello\n")
        with pytest.raises(ValueError, match="voc.txt:1"):
            Vocabulary.load(path)

    def test_bad_line_reports_line_number(self, tmp_path):
        v = Vocabulary(4, 2).fit(images())
        path = tmp_path / "voc.txt"
        v.save(path)
        lines = path.read_text().splitlines()
        lines[4] = lines[4].rsplit(" ", 1)[0] + " zz"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="voc.txt:5"):
            Vocabulary.load(path)

    def test_bundled(self):
        v = bundled_vocabulary()
        assert v.n_words_ == 100
        assert len(v.transform(images()[0])) > 0
