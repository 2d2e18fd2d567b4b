import numpy as np
import pytest

from o2na import datagen as dg
from o2na.errors import ConfigError, DataError, FormatError
from o2na.model import IGNORE_ID


def small_world(**kw):
    base = dict(n_videos=40, captions_per_video=3, n_frames=2, feature_dim=16,
                noise_sigma=0.05, seed=7)
    base.update(kw)
    return dg.WorldSpec(**base)


class TestSynthCorpus:
    def test_counts(self):
        spec = small_world(n_videos=25)
        feats, manifest = dg.synth_corpus(spec)
        assert len(manifest) == 25
        assert feats.shape == (25, 2 * spec.n_frames, spec.feature_dim)

    def test_deterministic_under_seed(self):
        a_feats, a_man = dg.synth_corpus(small_world())
        b_feats, b_man = dg.synth_corpus(small_world())
        assert a_man == b_man
        assert a_feats.tobytes() == b_feats.tobytes()

    def test_sigma_zero_identical_draws_identical_features(self):
        spec = small_world(objects=["box"], attributes=["red"], relations=["moves"],
                           noise_sigma=0.0, n_videos=6)
        feats, manifest = dg.synth_corpus(spec)
        for record in manifest:
            assert record["union_objects"] == ["box"]
        assert all(np.array_equal(feats[0], f) for f in feats)

    def test_empty_vocab_rejected(self):
        with pytest.raises(ConfigError):
            dg.synth_corpus(small_world(relations=[]))

    def test_manifest_self_consistency(self):
        _, manifest = dg.synth_corpus(small_world(n_videos=60))
        obj_set = set(dg.DEFAULT_OBJECTS)
        for record in manifest:
            union = set()
            for caption, objs in zip(record["captions"], record["objects"]):
                # per-caption object list == caption tokens found in the object vocab
                assert [t for t in caption if t in obj_set] == objs
                union |= set(objs)
            assert union == set(record["union_objects"])

    def test_caption_length_is_function_of_object_count(self):
        _, manifest = dg.synth_corpus(small_world(n_videos=80))
        for record in manifest:
            for caption, objs in zip(record["captions"], record["objects"]):
                assert len(caption) == {1: 5, 2: 8, 3: 10}[len(objs)]

    def test_first_caption_covers_the_union(self):
        _, manifest = dg.synth_corpus(small_world(n_videos=50))
        for record in manifest:
            assert record["objects"][0] == record["union_objects"]
            for objs in record["objects"][1:]:
                assert set(objs) <= set(record["union_objects"])

    def test_linear_probe_recovers_objects(self):
        # learnability oracle: a logistic probe on the mean feature row should
        # recover the drawn object set almost perfectly at sigma = 0.1
        spec = small_world(n_videos=700, noise_sigma=0.1, feature_dim=64, seed=3)
        feats, manifest = dg.synth_corpus(spec)
        obj_vocab = {w: i for i, w in enumerate(spec.objects)}
        x = feats.mean(axis=1)
        y = np.zeros((len(manifest), len(obj_vocab)))
        for i, record in enumerate(manifest):
            for w in record["union_objects"]:
                y[i, obj_vocab[w]] = 1.0
        x_train, y_train = x[:500], y[:500]
        x_test, y_test = x[500:], y[500:]
        w = np.zeros((x.shape[1], y.shape[1]))
        b = np.zeros(y.shape[1])
        for _ in range(400):
            p = 1.0 / (1.0 + np.exp(-(x_train @ w + b)))
            grad_w = x_train.T @ (p - y_train) / len(x_train)
            grad_b = (p - y_train).mean(axis=0)
            w -= 2.0 * grad_w
            b -= 2.0 * grad_b
        pred = (x_test @ w + b) > 0
        per_object_acc = (pred == y_test.astype(bool)).mean(axis=0)
        assert per_object_acc.min() >= 0.95


class TestVocab:
    def test_min_count_one_keeps_all_words(self):
        manifest = [{"video_id": "v0",
                     "captions": [["a", "dog"], ["a", "cat"], ["big", "dog"]],
                     "objects": [["dog"], ["cat"], ["dog"]],
                     "union_objects": ["dog", "cat"]}]
        vocab, objs = dg.build_vocab(manifest, min_count=1)
        assert len(vocab) == 4 + 3  # a, dog, cat, big + specials
        assert set(objs.words) == {"dog", "cat"}

    def test_rare_words_map_to_unk(self):
        manifest = [{"video_id": "v0",
                     "captions": [["dog", "runs"], ["dog", "sits"], ["dog", "runs"]],
                     "objects": [["dog"]] * 3, "union_objects": ["dog"]}]
        vocab, _ = dg.build_vocab(manifest, min_count=3)
        assert "dog" in vocab and "runs" not in vocab
        ids = vocab.encode(["dog", "runs"])
        assert ids[1] == vocab.unk_id

    def test_object_word_missing_from_vocab_dropped_with_warning(self, caplog):
        manifest = [{"video_id": "v0", "captions": [["dog", "runs"]] * 3,
                     "objects": [["dog"]] * 3, "union_objects": ["dog"]}]
        with caplog.at_level("WARNING"):
            vocab, objs = dg.build_vocab(manifest, min_count=3, object_words=["dog", "unicorn"])
        assert objs.words == ["dog"]
        assert "unicorn" in caplog.text

    def test_empty_manifest_rejected(self):
        with pytest.raises(DataError):
            dg.build_vocab([])

    def test_vocab_round_trip(self, tmp_path):
        vocab = dg.Vocab(["dog", "cat"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        back = dg.Vocab.from_lines(path.read_text().splitlines())
        assert back.words == vocab.words

    def test_unknown_object_words_raise(self):
        vocab = dg.Vocab(["dog"])
        objs = dg.ObjectVocab(["dog"], vocab)
        with pytest.raises(DataError, match="unicorn"):
            objs.ids_for(["unicorn"])


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        data = rng.normal(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "f.o2nafeat"
        dg.save_features(path, data)
        back = dg.load_features(path)
        assert back.dtype == np.float64
        assert np.array_equal(back.astype(np.float32), data)

    def test_default_world_rows(self, tmp_path):
        spec = dg.WorldSpec(n_videos=2)  # default N = 8
        feats, _ = dg.synth_corpus(spec)
        path = tmp_path / "f.o2nafeat"
        dg.save_features(path, feats)
        assert dg.load_features(path).shape[1] == 16

    def test_truncation_detected_with_offset(self, tmp_path, rng):
        path = tmp_path / "f.o2nafeat"
        dg.save_features(path, rng.normal(size=(2, 2, 3)).astype(np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(FormatError, match="byte"):
            dg.load_features(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"GARBAGE!" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            dg.load_features(path)


class TestManifestFile:
    def test_round_trip(self, tmp_path):
        _, manifest = dg.synth_corpus(small_world(n_videos=5))
        path = tmp_path / "m.jsonl"
        dg.write_manifest(path, manifest)
        assert dg.read_manifest(path) == manifest

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"video_id": "v0", "captions": [["a"]]}\n')
        with pytest.raises(FormatError, match="union_objects|objects"):
            dg.read_manifest(path)

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"video_id": "v0"\n')
        with pytest.raises(FormatError, match=":1:"):
            dg.read_manifest(path)


class TestBatchIter:
    @pytest.fixture
    def corpus(self):
        spec = small_world(n_videos=30)
        feats, manifest = dg.synth_corpus(spec)
        vocab, objs = dg.build_vocab(manifest, min_count=1, object_words=spec.objects)
        return feats.astype(np.float64), manifest, vocab, objs

    def test_batch_count_is_ceil(self, corpus):
        feats, manifest, vocab, objs = corpus
        batches = list(dg.batch_iter(manifest, feats, vocab, objs, batch_size=64, seed=0))
        assert len(batches) == -(-30 * 3 // 64)  # ceil(90 / 64) = 2

    def test_same_seed_same_order(self, corpus):
        feats, manifest, vocab, objs = corpus
        a = [b.sample_ids for b in dg.batch_iter(manifest, feats, vocab, objs, 16, seed=5)]
        b = [b.sample_ids for b in dg.batch_iter(manifest, feats, vocab, objs, 16, seed=5)]
        c = [b.sample_ids for b in dg.batch_iter(manifest, feats, vocab, objs, 16, seed=6)]
        assert a == b
        assert a != c

    def test_padding_carries_ignore_id(self, corpus):
        feats, manifest, vocab, objs = corpus
        for batch in dg.batch_iter(manifest, feats, vocab, objs, 16, seed=1):
            pad = batch.tokens == vocab.pad_id
            assert (batch.targets[pad] == IGNORE_ID).all()
            assert (batch.obj_targets[pad] == IGNORE_ID).all()
            assert (batch.targets[~pad] != IGNORE_ID).all()
            arange = np.arange(batch.tokens.shape[1])
            np.testing.assert_array_equal(pad, arange >= batch.lengths[:, None])

    def test_object_vectors_match_manifest(self, corpus):
        feats, manifest, vocab, objs = corpus
        by_id = {r["video_id"]: r for r in manifest}
        batch = next(dg.batch_iter(manifest, feats, vocab, objs, 8, seed=2))
        for row, sid in enumerate(batch.sample_ids):
            vid, cap = sid.split("#")
            record = by_id[vid]
            np.testing.assert_array_equal(
                batch.caption_objects[row], objs.multi_hot(record["objects"][int(cap)]))
            np.testing.assert_array_equal(
                batch.union_objects[row], objs.multi_hot(record["union_objects"]))

    def test_alignment_error(self, corpus):
        feats, manifest, vocab, objs = corpus
        with pytest.raises(DataError, match="manifest"):
            list(dg.batch_iter(manifest[:-1], feats, vocab, objs, 8, seed=0))

    def test_caption_longer_than_lmax_names_sample(self, corpus):
        feats, manifest, vocab, objs = corpus
        with pytest.raises(DataError, match="#"):
            list(dg.batch_iter(manifest, feats, vocab, objs, 8, seed=0, l_max=4))
