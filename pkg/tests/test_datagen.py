"""Tests for synthetic dataset generation, persistence, and ingestion."""

import numpy as np
import pytest
from PIL import Image

from diffboost.conditioning import PromptTriplet, Vocabulary
from diffboost.datagen import (
    CorpusSpec,
    DatasetManifest,
    IngestLayout,
    SampleRecord,
    SegTaskSpec,
    ingest_external,
    load_manifest,
    save_manifest,
    synth_corpus,
    synth_seg_task,
)
from diffboost.errors import ValidationError


class TestSynthCorpus:
    def test_deterministic_given_seed(self):
        a = synth_corpus(CorpusSpec(size=12), rng=7)
        b = synth_corpus(CorpusSpec(size=12), rng=7)
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.image, rb.image)
            np.testing.assert_array_equal(ra.edge, rb.edge)
            assert ra.triplet == rb.triplet and ra.split == rb.split

    def test_different_seed_changes_images(self):
        a = synth_corpus(CorpusSpec(size=4), rng=1)
        b = synth_corpus(CorpusSpec(size=4), rng=2)
        assert any(
            not np.array_equal(ra.image, rb.image) for ra, rb in zip(a.records, b.records)
        )

    def test_vocabulary_coverage(self):
        vocab = Vocabulary.default()
        manifest = synth_corpus(CorpusSpec(size=30), rng=0, vocab=vocab)
        assert {r.triplet.modality for r in manifest.records} == set(vocab.modalities)
        assert {r.triplet.organ for r in manifest.records} == set(vocab.organs)
        assert {r.triplet.category for r in manifest.records} == set(vocab.categories)
        for r in manifest.records:
            assert r.triplet.aug_texts == ()

    def test_modalities_have_distinct_intensity(self):
        manifest = synth_corpus(CorpusSpec(size=120), rng=3)
        means = {}
        for r in manifest.records:
            means.setdefault(r.triplet.modality, []).append(r.image.mean())
        levels = {m: np.mean(v) for m, v in means.items()}
        names = sorted(levels)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                assert abs(levels[a] - levels[b]) > 0.05, (a, b, levels)

    def test_value_range_and_quantization(self):
        manifest = synth_corpus(CorpusSpec(size=6), rng=5)
        for r in manifest.records:
            assert r.image.min() >= 0.0 and r.image.max() <= 1.0
            np.testing.assert_array_equal(r.image, np.round(r.image * 255) / 255)
            assert r.mask is None

    def test_default_spec_sizes(self):
        spec = CorpusSpec()
        assert spec.size == 2000 and spec.image_size == 32


class TestSynthSegTask:
    def test_default_has_32_records(self):
        manifest = synth_seg_task(rng=0)
        assert len(manifest) == 32
        assert len(manifest.split("train")) == 16
        assert len(manifest.split("val")) == 8
        assert len(manifest.split("test")) == 8

    def test_masks_nonempty_and_within_budget(self):
        manifest = synth_seg_task(SegTaskSpec(size=16), rng=1)
        for r in manifest.records:
            assert r.mask is not None
            frac = r.mask.mean()
            assert 0.05 <= frac <= 0.40
            assert set(np.unique(r.mask)) <= {0, 1}

    def test_interior_exterior_contrast(self):
        manifest = synth_seg_task(SegTaskSpec(size=16), rng=2)
        for r in manifest.records:
            fg = r.image[r.mask == 1].mean()
            bg = r.image[r.mask == 0].mean()
            assert abs(fg - bg) > 0.1

    def test_deterministic(self):
        a = synth_seg_task(SegTaskSpec(size=8), rng=9)
        b = synth_seg_task(SegTaskSpec(size=8), rng=9)
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.image, rb.image)
            np.testing.assert_array_equal(ra.mask, rb.mask)

    def test_random_organ_mode(self):
        manifest = synth_seg_task(SegTaskSpec(size=12, organ=None), rng=3)
        assert len({r.triplet.organ for r in manifest.records}) > 1


class TestManifestIO:
    def test_round_trip_is_exact(self, tmp_path):
        manifest = synth_seg_task(SegTaskSpec(size=6), rng=4)
        save_manifest(manifest, tmp_path / "task")
        loaded = load_manifest(tmp_path / "task")
        assert len(loaded) == 6
        for orig, back in zip(manifest.records, loaded.records):
            assert back.case_id == orig.case_id and back.split == orig.split
            np.testing.assert_array_equal(back.image, orig.image)
            np.testing.assert_array_equal(back.mask, orig.mask)
            np.testing.assert_array_equal(back.edge, orig.edge)
            assert back.triplet == orig.triplet

    def test_regeneration_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            save_manifest(synth_corpus(CorpusSpec(size=5), rng=11), tmp_path / name)
        for sub in ("manifest.json", "images/corpus_00000.png", "edges/corpus_00003.png"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError, match="manifest.json"):
            load_manifest(tmp_path / "nowhere")

    def test_duplicate_case_ids_rejected(self):
        r = synth_seg_task(SegTaskSpec(size=2), rng=0).records[0]
        with pytest.raises(ValidationError, match="duplicate"):
            DatasetManifest(kind="segmentation", seed=0, records=[r, r])

    def test_volume_split_consistency(self):
        base = synth_seg_task(SegTaskSpec(size=4), rng=0)
        a, b = base.records[0], base.records[-1]
        a.source_volume_id = b.source_volume_id = "vol1"
        assert a.split != b.split
        with pytest.raises(ValidationError, match="vol1"):
            DatasetManifest(kind="segmentation", seed=0, records=[a, b])


def _write_pair(root, name, image_values, mask_values):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image_values, dtype=np.uint8), mode="L").save(
        root / "images" / f"{name}.png"
    )
    Image.fromarray(np.asarray(mask_values, dtype=np.uint8), mode="L").save(
        root / "masks" / f"{name}.png"
    )


class TestIngestExternal:
    def test_empty_directory_warns(self, tmp_path):
        with pytest.warns(UserWarning, match="no cases"):
            manifest = ingest_external(tmp_path)
        assert len(manifest) == 0

    def test_single_pair_unit_spacing(self, tmp_path):
        img = np.zeros((16, 16), dtype=np.uint8)
        img[4:12, 4:12] = 200
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:12, 4:12] = 255
        _write_pair(tmp_path, "case1", img, mask)
        manifest = ingest_external(tmp_path)
        assert len(manifest) == 1
        rec = manifest.records[0]
        assert rec.spacing == (1.0, 1.0)
        assert rec.source_volume_id is None
        assert set(np.unique(rec.mask)) == {0, 1}
        assert rec.image.max() == pytest.approx(200 / 255)

    def test_volume_grouping_and_spacing_sidecar(self, tmp_path):
        img = np.full((8, 8), 100, dtype=np.uint8)
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:5, 2:5] = 255
        _write_pair(tmp_path, "vol1_s0", img, mask)
        _write_pair(tmp_path, "vol1_s1", img, mask)
        _write_pair(tmp_path, "vol2_s0", img, mask)
        (tmp_path / "spacing.txt").write_text("default: 1 1\nvol1: 0.5 0.8\n")
        manifest = ingest_external(tmp_path)
        by_id = {r.case_id: r for r in manifest.records}
        assert by_id["vol1_s0"].source_volume_id == "vol1"
        assert by_id["vol1_s0"].spacing == (0.5, 0.8)
        assert by_id["vol2_s0"].spacing == (1.0, 1.0)

    def test_orphan_image_reported(self, tmp_path):
        img = np.full((8, 8), 50, dtype=np.uint8)
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[1:3, 1:3] = 255
        _write_pair(tmp_path, "ok", img, mask)
        Image.fromarray(img, mode="L").save(tmp_path / "images" / "lonely.png")
        with pytest.raises(ValidationError, match="image without mask: lonely"):
            ingest_external(tmp_path)

    def test_non_binary_mask_reported(self, tmp_path):
        img = np.full((8, 8), 50, dtype=np.uint8)
        bad_mask = np.full((8, 8), 37, dtype=np.uint8)
        _write_pair(tmp_path, "bad", img, bad_mask)
        with pytest.raises(ValidationError, match="non-binary mask bad"):
            ingest_external(tmp_path)

    def test_custom_triplet(self, tmp_path):
        img = np.full((8, 8), 50, dtype=np.uint8)
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[1:4, 1:4] = 255
        _write_pair(tmp_path, "c", img, mask)
        layout = IngestLayout(triplet=PromptTriplet("xray", "ring", "normal"))
        manifest = ingest_external(tmp_path, layout)
        assert manifest.records[0].triplet.modality == "xray"


class TestSampleRecordValidation:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="edge"):
            SampleRecord(
                case_id="x",
                image=np.zeros((8, 8)),
                triplet=PromptTriplet("xray", "ring", "normal"),
                edge=np.zeros((4, 4)),
                split="train",
            )

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValidationError, match="binary"):
            SampleRecord(
                case_id="x",
                image=np.zeros((8, 8)),
                triplet=PromptTriplet("xray", "ring", "normal"),
                edge=np.zeros((8, 8)),
                split="train",
                mask=np.full((8, 8), 2),
            )

    def test_unknown_split_rejected(self):
        with pytest.raises(ValidationError, match="split"):
            SampleRecord(
                case_id="x",
                image=np.zeros((8, 8)),
                triplet=PromptTriplet("xray", "ring", "normal"),
                edge=np.zeros((8, 8)),
                split="holdout",
            )
