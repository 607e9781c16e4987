import shutil
from collections import Counter

import numpy as np
import pytest

from kwm.augment import AugmentConfig
from kwm.data import (
    SPLITS,
    TARGET_WORDS,
    ArrayDataset,
    BatchStream,
    LabelTask,
    Manifest,
    ManifestEntry,
    build_manifest,
    cached_split,
    load_example,
    load_noise_pool,
    noise_region,
    read_manifest_csv,
    speaker_id,
    split_of,
    write_manifest_csv,
)
from kwm.errors import ConfigError, DataError, FormatError
from kwm.features import load_wav, mfcc
from kwm.synthetic import make_speech_commands_tree


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return make_speech_commands_tree(tmp_path_factory.mktemp("sc"), speakers=40)


def test_keyword_task_order_is_fixed():
    task = LabelTask.from_name("v2-12")
    assert task.classes == ("up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop",
                            "silence", "unknown")
    with pytest.raises(ConfigError):
        LabelTask.from_name("V3-12")


def test_full_vocabulary_tasks_are_sorted():
    words = [f"w{i:02d}" for i in range(35)][::-1]
    task = LabelTask.from_name("V2-35", words)
    assert list(task.classes) == sorted(words)
    with pytest.raises(DataError):
        LabelTask.from_name("V1-30", words)


def test_speaker_hash_split():
    assert speaker_id("yes/0a7c2a8d_nohash_3.wav") == "0a7c2a8d"
    assert split_of("up/0a7c2a8d_nohash_0.wav") == split_of("go/0a7c2a8d_nohash_4.wav")
    buckets = Counter(split_of(f"x/{i:08x}_nohash_0.wav") for i in range(20000))
    assert abs(buckets["train"] / 20000 - 0.8) < 0.02
    assert abs(buckets["val"] / 20000 - 0.1) < 0.01
    assert abs(buckets["test"] / 20000 - 0.1) < 0.01


def test_noise_regions_partition_the_clip():
    regions = [noise_region(1000, s) for s in SPLITS]
    assert regions == [(0, 800), (800, 900), (900, 1000)]


def test_speakers_never_cross_splits(corpus):
    m = build_manifest(corpus, "V2-12")
    owner = {}
    for e in m.entries:
        if "#" in e.path:
            continue
        assert owner.setdefault(speaker_id(e.path), e.split) == e.split


def test_keyword_manifest_balance(corpus):
    m = build_manifest(corpus, "V2-12", seed=3)
    task = m.task
    assert all(0 <= e.label < task.num_classes for e in m.entries)
    for split, counts in m.counts().items():
        per_class = np.mean([counts[w] for w in TARGET_WORDS])
        assert counts["silence"] == round(per_class)
        # three non-target words per speaker leave enough unknowns to balance fully
        assert counts["unknown"] == round(per_class)
        assert all(counts[c] > 0 for c in task.classes), split


def test_silence_crops_stay_inside_their_split_region(corpus):
    m = build_manifest(corpus, "V2-12")
    lengths = {}
    for e in m.entries:
        if "#" not in e.path:
            continue
        rel, start = e.path.rsplit("#", 1)
        n = lengths.setdefault(rel, load_wav(corpus / rel).samples.size)
        lo, hi = noise_region(n, e.split)
        assert lo <= int(start) and int(start) + 16000 <= hi
        assert load_example(corpus, e.path).samples.size == 16000


def test_full_vocabulary_manifest_covers_every_file(corpus):
    words = sorted(p.name for p in corpus.iterdir() if not p.name.startswith("_"))
    task = LabelTask("custom", tuple(words))
    m = build_manifest(corpus, task)
    assert len(m.entries) == sum(1 for _ in corpus.glob("*/*.wav")) - 2
    assert {m.task.classes[e.label] for e in m.entries} == set(words)


def test_manifest_is_deterministic(corpus):
    assert build_manifest(corpus, "V2-12", seed=5).entries == build_manifest(corpus, "V2-12", seed=5).entries


def test_list_files_override_the_hash(corpus, tmp_path):
    root = tmp_path / "sc"
    shutil.copytree(corpus, root)
    (root / "validation_list.txt").write_text("up/00000000_nohash_0.wav\n")
    (root / "testing_list.txt").write_text("down/00000001_nohash_0.wav\n")
    m = build_manifest(root, "V2-12", use_list_files=True)
    where = {e.path: e.split for e in m.entries}
    assert where["up/00000000_nohash_0.wav"] == "val"
    assert where["down/00000001_nohash_0.wav"] == "test"
    assert where["up/00000001_nohash_0.wav"] == "train"


def test_missing_inputs(tmp_path, corpus):
    with pytest.raises(DataError):
        build_manifest(tmp_path / "nope", "V2-12")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        build_manifest(tmp_path / "empty", "V2-12")
    root = tmp_path / "no_noise"
    shutil.copytree(corpus, root, ignore=shutil.ignore_patterns("_background_noise_"))
    with pytest.raises(DataError, match="_background_noise_"):
        build_manifest(root, "V2-12")


def test_manifest_csv_round_trip(corpus, tmp_path):
    m = build_manifest(corpus, "V2-12")
    path = tmp_path / "manifest.csv"
    write_manifest_csv(path, m)
    assert path.read_text().splitlines()[0] == "path,label,split"
    back = read_manifest_csv(path)
    assert back.task == m.task and back.entries == m.entries


def test_manifest_csv_errors(tmp_path):
    task = LabelTask.from_name("V2-12")
    bad = tmp_path / "m.csv"
    bad.write_text("file,label,split\n")
    with pytest.raises(FormatError):
        read_manifest_csv(bad, task)
    bad.write_text("path,label,split\na.wav,12,train\n")
    with pytest.raises(DataError):
        read_manifest_csv(bad, task)
    bad.write_text("path,label,split\na.wav,1,holdout\n")
    with pytest.raises(DataError):
        read_manifest_csv(bad, task)


# -- batching --------------------------------------------------------------------------

def test_eval_stream_is_deterministic_and_raw(corpus):
    m = build_manifest(corpus, "V2-12")
    a = list(BatchStream(m, "test", 16, root=corpus, augment=AugmentConfig()))
    b = list(BatchStream(m, "test", 16, root=corpus, augment=AugmentConfig()))
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
    first = m.split("test")[0]
    np.testing.assert_array_equal(a[0].features[0], mfcc(load_example(corpus, first.path)).coeffs)
    assert a[0].features.flags["C_CONTIGUOUS"] and a[0].features.shape[1:] == (40, 98)


def test_remainder_batch():
    ds = ArrayDataset(np.zeros((130, 40, 98)), np.zeros(130))
    assert [len(b.labels) for b in ds.batches(128)] == [128, 2]
    m = Manifest(LabelTask.from_name("V2-12"), [ManifestEntry("x.wav", 0, "test")] * 130)
    assert len(BatchStream(m, "test", 128)) == 2


def test_train_epochs_permute_the_same_examples(corpus):
    m = build_manifest(corpus, "V2-12")
    pool = load_noise_pool(corpus, "train")
    e1 = np.concatenate([b.indices for b in BatchStream(m, "train", 32, 7, 1, root=corpus, augment=AugmentConfig(),
                                                        noise_pool=pool)])
    e2 = np.concatenate([b.indices for b in BatchStream(m, "train", 32, 7, 2, root=corpus, augment=AugmentConfig(),
                                                        noise_pool=pool)])
    assert not np.array_equal(e1, e2)
    assert sorted(e1) == sorted(e2) == list(range(len(m.split("train"))))


def test_unreadable_files_are_skipped_then_fatal(corpus, tmp_path):
    good = build_manifest(corpus, "V2-12").split("test")
    task = LabelTask.from_name("V2-12")
    entries = good * (1 + 100 // len(good)) + [ManifestEntry("missing/none.wav", 0, "test")]
    stream = BatchStream(Manifest(task, entries), "test", 64, root=corpus)
    assert sum(len(b.labels) for b in stream) == len(entries) - 1
    assert stream.skipped == 1
    broken = Manifest(task, good[:10] + [ManifestEntry("missing/none.wav", 0, "test")])
    with pytest.raises(DataError, match="unreadable"):
        list(BatchStream(broken, "test", 64, root=corpus))


def test_noise_pool_uses_only_its_region(corpus):
    pool = load_noise_pool(corpus, "train")
    full = load_wav(corpus / "_background_noise_" / "white_noise.wav").samples
    lo, hi = noise_region(full.size, "train")
    assert any(np.array_equal(w.samples, full[lo:hi]) for w in pool)


def test_feature_cache(corpus, tmp_path):
    m = build_manifest(corpus, "V2-12")
    a = cached_split(m, "val", corpus, tmp_path)
    files = list((tmp_path / "cache").glob("val-*.npz"))
    assert len(files) == 1
    b = cached_split(m, "val", corpus, tmp_path)
    np.testing.assert_array_equal(a.features, b.features)
    assert len(a) == len(m.split("val"))


def test_custom_keyword_task(corpus):
    task = LabelTask.from_name("keywords:yes,no")
    assert task.classes == ("yes", "no", "silence", "unknown") and task.is_keyword_task
    m = build_manifest(corpus, task)
    for split, counts in m.counts().items():
        assert counts["silence"] == counts["unknown"] == round((counts["yes"] + counts["no"]) / 2), split
    assert LabelTask.from_name(m.task.name) == task
    for bad in ("keywords:", "keywords:yes,yes", "keywords:yes,silence"):
        with pytest.raises(ConfigError):
            LabelTask.from_name(bad)
