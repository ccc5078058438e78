import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svkit import corpus
from svkit.errors import DataError, FormatError


def make_set(names, vectors):
    return corpus.EmbeddingSet(names, np.array(vectors, dtype=np.float32))


class TestEmbeddingFormat:
    def test_round_trip_identity(self, tmp_path):
        emb = make_set(["a", "b", "c"], [[1, 2, 3, 4], [5, 6, 7, 8], [-1, 0, 0.5, 2]])
        path = tmp_path / "x.emb"
        corpus.write_embedding_set(emb, path)
        assert corpus.read_embedding_set(path) == emb

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            corpus.read_embedding_set(path)

    def test_truncated_header_count_names_byte_counts(self, tmp_path):
        # header claims 1,092,009 records but the payload holds a single one
        path = tmp_path / "trunc.emb"
        with open(path, "wb") as f:
            f.write(corpus.EMB_MAGIC)
            f.write(struct.pack("<IQ", 4, 1_092_009))
            f.write(struct.pack("<H", 2) + b"u0")
            f.write(np.zeros(4, dtype="<f4").tobytes())
        with pytest.raises(FormatError) as err:
            corpus.read_embedding_set(path)
        message = str(err.value)
        assert "1092009" in message.replace(",", "")
        # names the expected and the actual byte counts
        assert "expected at least" in message
        assert f"{path.stat().st_size} bytes" in message

    def test_deterministic_bytes(self, tmp_path):
        emb = make_set(["u1", "u2"], [[0.25, -1.5], [3.0, 9.0]])
        p1, p2 = tmp_path / "a.emb", tmp_path / "b.emb"
        corpus.write_embedding_set(emb, p1)
        corpus.write_embedding_set(emb, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_set_header_only(self, tmp_path):
        emb = corpus.EmbeddingSet([], np.empty((0, 256), dtype=np.float32), dim=256)
        path = tmp_path / "empty.emb"
        corpus.write_embedding_set(emb, path)
        raw = path.read_bytes()
        assert len(raw) >= 14
        assert raw[:4] == b"EMB1"
        back = corpus.read_embedding_set(path)
        assert len(back) == 0 and back.dim == 256

    def test_hand_decoded_payload(self, tmp_path):
        # dim-2 {("a", [1, 0])}: magic, dim=2, count=1, name "a", floats 1.0 0.0
        path = tmp_path / "one.emb"
        corpus.write_embedding_set(make_set(["a"], [[1.0, 0.0]]), path)
        raw = path.read_bytes()
        assert raw[:4] == b"EMB1"
        dim, count = struct.unpack_from("<IQ", raw, 4)
        assert (dim, count) == (2, 1)
        (nlen,) = struct.unpack_from("<H", raw, 16)
        assert raw[18:18 + nlen] == b"a"
        values = struct.unpack_from("<2f", raw, 18 + nlen)
        assert values == (1.0, 0.0)
        assert len(raw) == 18 + nlen + 8

    def test_duplicate_names_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            make_set(["a", "a"], [[1.0], [2.0]])

    def test_non_finite_rejected(self):
        with pytest.raises(DataError, match="finite"):
            make_set(["a"], [[np.inf]])

    @settings(max_examples=30, deadline=None)
    @given(st.data())
    def test_round_trip_property(self, tmp_path_factory, data):
        n = data.draw(st.integers(0, 8))
        dim = data.draw(st.integers(1, 12))
        names = data.draw(st.lists(st.text(min_size=1, max_size=10), min_size=n,
                                   max_size=n, unique=True))
        values = data.draw(st.lists(
            st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32),
                     min_size=dim, max_size=dim),
            min_size=n, max_size=n))
        emb = corpus.EmbeddingSet(names, np.array(values, dtype=np.float32).reshape(n, dim),
                                  dim=dim)
        path = tmp_path_factory.mktemp("rt") / "x.emb"
        corpus.write_embedding_set(emb, path)
        assert corpus.read_embedding_set(path) == emb


class TestMatrixContainer:
    def test_round_trip(self, tmp_path):
        mats = {"proj": np.arange(12, dtype=np.float32).reshape(3, 4),
                "bias": np.ones((1, 4), dtype=np.float32)}
        path = tmp_path / "m.mat"
        corpus.write_matrices(path, mats)
        back = corpus.read_matrices(path)
        assert set(back) == {"proj", "bias"}
        np.testing.assert_array_equal(back["proj"], mats["proj"])

    def test_truncation(self, tmp_path):
        path = tmp_path / "m.mat"
        corpus.write_matrices(path, {"a": np.ones((4, 4))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            corpus.read_matrices(path)


class TestTrialList:
    def test_minimal_labeled(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("u1 u2 target\nu3 u4 nontarget\n")
        trials = corpus.parse_trial_list(path)
        assert len(trials) == 2 and trials.labeled
        assert trials.pairs[0].label == "target"
        assert trials.pairs[1].label == "nontarget"

    def test_numeric_label_aliases(self, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        a.write_text("u1 u2 1\nu3 u4 0\n")
        b.write_text("u1 u2 target\nu3 u4 nontarget\n")
        assert corpus.parse_trial_list(a) == corpus.parse_trial_list(b)

    def test_mixed_labeling_reports_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("u1 u2 target\nu3 u4\n")
        with pytest.raises(FormatError, match=r":2:"):
            corpus.parse_trial_list(path)

    def test_unknown_label_token(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("u1 u2 target\nu3 u4 maybe\n")
        with pytest.raises(FormatError, match=r":2:.*maybe"):
            corpus.parse_trial_list(path)

    def test_short_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("lonely\n")
        with pytest.raises(FormatError, match=r":1:"):
            corpus.parse_trial_list(path)

    def test_duplicate_pair_rejected(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("u1 u2\nu1 u2\n")
        with pytest.raises(FormatError, match="duplicate"):
            corpus.parse_trial_list(path)

    def test_round_trip(self, tmp_path):
        trials = corpus.TrialList([corpus.Trial("e1", "t1", "target"),
                                   corpus.Trial("e2", "t2", "nontarget")])
        path = tmp_path / "t.txt"
        corpus.write_trial_list(trials, path)
        assert corpus.parse_trial_list(path) == trials


class TestScoreSet:
    def test_round_trip_bit_exact(self, tmp_path):
        trials = corpus.TrialList([corpus.Trial("a", "b"), corpus.Trial("c", "d")])
        scores = corpus.ScoreSet(trials, np.array([0.123456789012345678, -1e-17]))
        path = tmp_path / "s.txt"
        corpus.write_score_set(scores, path)
        back = corpus.read_score_set(path)
        np.testing.assert_array_equal(back.scores, scores.scores)

    def test_with_labels_from(self):
        unlabeled = corpus.ScoreSet(
            corpus.TrialList([corpus.Trial("a", "b"), corpus.Trial("c", "d")]),
            np.array([0.5, 0.2]))
        labeled = corpus.TrialList([corpus.Trial("c", "d", "nontarget"),
                                    corpus.Trial("a", "b", "target")])
        joined = unlabeled.with_labels_from(labeled)
        assert [t.label for t in joined.pairs.pairs] == ["target", "nontarget"]

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            corpus.ScoreSet(corpus.TrialList([corpus.Trial("a", "b")]),
                            np.array([1.0, 2.0]))


class TestManifest:
    def test_source_requires_speaker(self):
        with pytest.raises(DataError, match="speaker"):
            corpus.Manifest([corpus.ManifestEntry("u1", None, "source", 3.0)])

    def test_target_may_omit_speaker(self):
        m = corpus.Manifest([corpus.ManifestEntry("u1", None, "target", 3.0)])
        assert m.entries[0].speaker is None

    def test_duplicate_utt(self):
        with pytest.raises(DataError, match="duplicate"):
            corpus.Manifest([corpus.ManifestEntry("u", "s", "source", 1.0),
                             corpus.ManifestEntry("u", "s", "source", 2.0)])

    def test_round_trip(self, tmp_path):
        m = corpus.Manifest([corpus.ManifestEntry("u1", "spk1", "source", 3.25),
                             corpus.ManifestEntry("u2", None, "target", 1.5, 1.1, "music")])
        path = tmp_path / "m.txt"
        corpus.write_manifest(m, path)
        back = corpus.read_manifest(path)
        assert back.entries == m.entries
