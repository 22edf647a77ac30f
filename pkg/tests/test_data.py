import numpy as np
import pytest

from moe_asr.data import (SynthConfig, Utterance, generate, load_corpus,
                          save_corpus, split_by_id_hash)
from moe_asr.errors import ConfigError, DataFormatError


class TestGenerate:
    def test_same_seed_is_bit_identical(self):
        cfg = SynthConfig(seed=11)
        a = generate(cfg, 20)
        b = generate(cfg, 20)
        for ua, ub in zip(a, b):
            assert np.array_equal(ua.frames, ub.frames)
            assert np.array_equal(ua.labels, ub.labels)
            assert (ua.domain_id, ua.accent_id, ua.utt_id) == \
                (ub.domain_id, ub.accent_id, ub.utt_id)

    def test_different_seed_differs(self):
        a = generate(SynthConfig(seed=1), 5)
        b = generate(SynthConfig(seed=2), 5)
        assert not np.array_equal(a[0].frames, b[0].frames)

    def test_noiseless_single_condition_frames_are_function_of_labels(self):
        cfg = SynthConfig(n_domains=1, n_accents=1, noise_scale=0.0,
                          seed=5)
        utts = generate(cfg, 40)
        label_to_vec: dict[int, bytes] = {}
        for u in utts:
            # collapse consecutive identical frame rows into segment runs
            runs = [u.frames[0]]
            for row in u.frames[1:]:
                if not np.array_equal(row, runs[-1]):
                    runs.append(row)
            collapsed_labels = [u.labels[0]]
            for lab in u.labels[1:]:
                if lab != collapsed_labels[-1]:
                    collapsed_labels.append(lab)
            assert len(runs) == len(collapsed_labels)
            for lab, vec in zip(collapsed_labels, runs):
                key = int(lab)
                if key in label_to_vec:
                    assert label_to_vec[key] == vec.tobytes()
                else:
                    label_to_vec[key] = vec.tobytes()

    def test_ctc_feasibility_invariant(self):
        utts = generate(SynthConfig(seed=3), 2000)
        for u in utts:
            assert u.t >= 2 * len(u.labels) + 1

    def test_marginals_match_priors_within_two_percent(self):
        cfg = SynthConfig(seed=7, domain_priors=[0.5, 0.2, 0.1, 0.1,
                                                 0.05, 0.05])
        utts = generate(cfg, 10_000)
        counts = np.bincount([u.domain_id for u in utts],
                             minlength=cfg.n_domains) / len(utts)
        assert np.all(np.abs(counts - cfg.domain_priors) < 0.02)
        acc = np.bincount([u.accent_id for u in utts],
                          minlength=cfg.n_accents) / len(utts)
        assert np.all(np.abs(acc - 0.25) < 0.02)

    def test_linear_probe_separates_domains(self):
        # nearest-centroid on mean-pooled frames: the domain bias is 2x the
        # noise scale, so the additive channel cue must be easily learnable
        cfg = SynthConfig(seed=13, n_domains=4, domain_bias_scale=1.0,
                          noise_scale=0.5)
        utts = generate(cfg, 600)
        train, test = utts[:400], utts[400:]
        pooled = {u.utt_id: u.frames.mean(axis=0) for u in utts}
        centroids = np.zeros((cfg.n_domains, cfg.d_feat))
        counts = np.zeros(cfg.n_domains)
        for u in train:
            centroids[u.domain_id] += pooled[u.utt_id]
            counts[u.domain_id] += 1
        centroids /= counts[:, None]
        correct = sum(
            int(np.argmin(np.linalg.norm(centroids - pooled[u.utt_id],
                                         axis=1)) == u.domain_id)
            for u in test)
        assert correct / len(test) > 0.9

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(vocab_size=0)
        with pytest.raises(ConfigError):
            SynthConfig(t_max=10, label_max=8)   # cannot fit 2*8+1 frames
        with pytest.raises(ConfigError):
            SynthConfig(domain_priors=[0.5, 0.5])  # wrong length for 6
        with pytest.raises(ConfigError):
            generate(SynthConfig(), 0)


class TestSplit:
    def test_split_is_deterministic_and_disjoint(self):
        utts = generate(SynthConfig(seed=1), 500)
        train1, test1 = split_by_id_hash(utts, 0.25)
        train2, test2 = split_by_id_hash(utts, 0.25)
        assert [u.utt_id for u in train1] == [u.utt_id for u in train2]
        assert len(train1) + len(test1) == 500
        assert 0.15 < len(test1) / 500 < 0.35
        assert not {u.utt_id for u in train1} & {u.utt_id for u in test1}


class TestCorpusSerialization:
    def test_round_trip_is_bit_exact(self, tmp_path):
        utts = generate(SynthConfig(seed=9), 25)
        path = tmp_path / "corpus.bin"
        save_corpus(path, utts)
        loaded = load_corpus(path)
        assert len(loaded) == len(utts)
        for a, b in zip(utts, loaded):
            assert a.frames.tobytes() == b.frames.tobytes()
            assert np.array_equal(a.labels, b.labels)
            assert a.domain_id == b.domain_id
            assert a.accent_id == b.accent_id
            assert a.utt_id == b.utt_id
        path2 = tmp_path / "again.bin"
        save_corpus(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataFormatError):
            load_corpus(path)

    def test_truncated_file_rejected(self, tmp_path):
        utts = generate(SynthConfig(seed=9), 3)
        path = tmp_path / "corpus.bin"
        save_corpus(path, utts)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 10])
        with pytest.raises(DataFormatError):
            load_corpus(path)

    def test_unicode_utt_ids_survive(self, tmp_path):
        u = Utterance(frames=np.zeros((3, 2)),
                      labels=np.array([0], dtype=np.int32),
                      domain_id=0, accent_id=0, utt_id="uttérance-0")
        path = tmp_path / "c.bin"
        save_corpus(path, [u])
        assert load_corpus(path)[0].utt_id == "uttérance-0"
