from collections import Counter

import numpy as np
import pytest

from vladr.datasets import (
    GenParams,
    IngestError,
    PKEpochSampler,
    SamplingError,
    StreamConfigError,
    _make_identities,
    attribute_oracle,
    export_domain,
    generate_stream,
    ingest_embeddings,
    read_token_file,
    render_domain,
    sample_pk_batch,
    write_attribute_file,
    write_label_file,
    write_token_file,
)


def small_params(**overrides):
    base = dict(
        domains=2,
        unseen_domains=1,
        ids_per_domain=6,
        test_ids_per_domain=6,
        imgs_per_id=4,
        seq_len=9,
        dim=16,
        n_attributes=4,
        values_per_attribute=4,
        tokens_per_attribute=2,
        cameras=2,
    )
    base.update(overrides)
    return GenParams(**base)


class TestGeneration:
    def test_same_seed_is_bitwise_identical(self):
        a = generate_stream(3, small_params())
        b = generate_stream(3, small_params())
        for da, db in zip(a.all_datasets(), b.all_datasets()):
            assert len(da) == len(db)
            for ra, rb in zip(da.all(), db.all()):
                assert ra.item_id == rb.item_id
                assert np.array_equal(ra.tokens, rb.tokens)
                assert np.array_equal(ra.text_attr, rb.text_attr)
                assert np.array_equal(ra.ownership, rb.ownership)

    def test_zero_noise_reconstructs_components(self):
        params = small_params(ids_per_domain=2, imgs_per_id=1, noise_sigma=0.0)
        stream = generate_stream(11, params)
        ds = stream.train[0]
        id_map = {i.id: i for i in ds.identities}
        for rec in ds.all():
            ident = id_map[rec.identity]
            for slot, owner in enumerate(rec.ownership):
                if owner < 0:
                    continue
                expect = (
                    stream.catalog.vis_code(ident.attr_values[owner])
                    + ident.latent
                    + ds.style_offset
                ).astype(np.float32).astype(np.float64)
                assert np.array_equal(rec.tokens[slot], expect)

    def test_nearest_codebook_recovers_values(self):
        stream = generate_stream(0, GenParams())
        cat = stream.catalog
        hits = total = 0
        for ds in stream.train[:2]:
            id_map = {i.id: i for i in ds.identities}
            for rec in ds.all():
                ident = id_map[rec.identity]
                for slot, owner in enumerate(rec.ownership):
                    if owner < 0:
                        continue
                    tok = rec.tokens[slot] / np.linalg.norm(rec.tokens[slot])
                    # brute-force nearest neighbour over the attribute's codebook
                    best, best_sim = None, -np.inf
                    for j in range(cat.values_per_attribute):
                        sim = float(cat.vis_codes[owner, j] @ tok)
                        if sim > best_sim:
                            best, best_sim = j, sim
                    truth = ident.attr_values[owner] - owner * cat.values_per_attribute
                    hits += int(best == truth)
                    total += 1
        assert hits / total > 0.95

    def test_infeasible_seq_len_rejected(self):
        with pytest.raises(StreamConfigError):
            generate_stream(0, small_params(seq_len=8, n_attributes=4, tokens_per_attribute=2))

    def test_ownership_census(self):
        params = small_params()
        stream = generate_stream(5, params)
        for rec in stream.train[0].all():
            counts = Counter(rec.ownership.tolist())
            for p in range(params.n_attributes):
                assert counts[p] == params.tokens_per_attribute
            assert counts[-1] == params.seq_len - params.n_attributes * params.tokens_per_attribute
            assert counts[-1] >= 1

    def test_identities_unique_across_domains(self):
        stream = generate_stream(9, small_params())
        seen = set()
        for ds in stream.all_datasets():
            ids = set(r.identity for r in ds.all())
            assert not (ids & seen)
            seen |= ids

    def test_catalog_codebooks_unit_norm_and_shared(self):
        stream = generate_stream(7, small_params())
        cat = stream.catalog
        norms = np.linalg.norm(cat.text_codes, axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-6)
        assert np.allclose(np.linalg.norm(cat.vis_codes, axis=-1), 1.0, atol=1e-6)
        # unseen domains share the text codebooks exactly
        for ds in stream.unseen_tests:
            assert ds.catalog is cat
            rec = ds.all()[0]
            id_map = {i.id: i for i in ds.identities}
            ident = id_map[rec.identity]
            for p in range(cat.n_attributes):
                assert np.array_equal(rec.text_attr[p], cat.text_code(ident.attr_values[p]))

    def test_attribute_separability_margin(self):
        stream = generate_stream(0, GenParams())
        cat = stream.catalog
        ds = stream.train[0]
        id_map = {i.id: i for i in ds.identities}
        by_value = {}
        for rec in ds.all():
            ident = id_map[rec.identity]
            for slot, owner in enumerate(rec.ownership):
                if owner < 0:
                    continue
                tok = rec.tokens[slot] / np.linalg.norm(rec.tokens[slot])
                by_value.setdefault(ident.attr_values[owner], []).append(tok)
        within, across = [], []
        values = sorted(by_value)
        for v in values:
            arr = np.stack(by_value[v])
            iu = np.triu_indices(len(arr), 1)
            within.extend((arr @ arr.T)[iu])
        for i, vi in enumerate(values):
            for vj in values[i + 1 :]:
                if cat.attribute_of(vi) != cat.attribute_of(vj):
                    continue
                across.extend((np.stack(by_value[vi]) @ np.stack(by_value[vj]).T).ravel())
        assert np.mean(within) - np.mean(across) > 0.1

    def test_domain_shift_degrades_centroid_classifier(self):
        params = GenParams()
        stream = generate_stream(0, params)
        cat = stream.catalog
        ids = _make_identities(np.random.default_rng(7), cat, 32, 10_000, params.latent_norm)
        d1, d2 = stream.train[0], stream.train[1]
        ds_a = render_domain(cat, ids, params, d1.style_offset, d1.clutter_mean,
                             np.random.default_rng(11), 91, "probe")
        ds_b = render_domain(cat, ids, params, d2.style_offset, d2.clutter_mean,
                             np.random.default_rng(12), 92, "probe")

        def feats(ds):
            recs = ds.all()
            return (np.stack([r.tokens.mean(axis=0) for r in recs]),
                    np.array([r.identity for r in recs]))

        fa, ya = feats(ds_a)
        fb, yb = feats(ds_b)
        fit = np.arange(len(fa)) % 2 == 0
        labels = np.unique(ya)
        centroids = np.stack([fa[fit & (ya == y)].mean(axis=0) for y in labels])

        def acc(f, y):
            d = ((f[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
            return float((labels[np.argmin(d, axis=1)] == y).mean())

        assert acc(fa[~fit], ya[~fit]) - acc(fb, yb) > 0.05


class TestAttributeOracle:
    def test_same_identity_same_embeddings(self):
        stream = generate_stream(2, small_params())
        ds = stream.train[0]
        by_id = ds.indices_by_identity()
        idx = next(iter(by_id.values()))
        a, b = ds.fetch(idx[:2])
        for p in range(stream.params.n_attributes):
            assert np.array_equal(attribute_oracle(a, p), attribute_oracle(b, p))

    def test_embedding_in_codebook(self):
        stream = generate_stream(2, small_params())
        cat = stream.catalog
        rec = stream.train[0].all()[0]
        for p in range(cat.n_attributes):
            emb = attribute_oracle(rec, p)
            assert any(np.array_equal(emb, cat.text_codes[p, j]) for j in range(cat.values_per_attribute))

    def test_cross_attribute_distinctness(self):
        stream = generate_stream(2, small_params())
        cat = stream.catalog
        rec = stream.train[0].all()[0]
        for p in range(cat.n_attributes):
            emb = attribute_oracle(rec, p)
            for q in range(cat.n_attributes):
                if q == p:
                    continue
                sims = cat.text_codes[q] @ emb
                assert (sims < 1.0 - 1e-6).all()


class TestPKSampling:
    def test_exhaustive_tiny_case(self):
        stream = generate_stream(4, small_params(ids_per_domain=2, imgs_per_id=2, cameras=2))
        ds = stream.train[0]
        batch = sample_pk_batch(ds, 2, 2, np.random.default_rng(0))
        assert sorted(r.item_id for r in batch) == sorted(r.item_id for r in ds.all())

    def test_batch_census(self):
        stream = generate_stream(4, small_params())
        ds = stream.train[0]
        sampler = PKEpochSampler(ds, 3, 2, np.random.default_rng(1))
        for idx in sampler:
            recs = ds.fetch(idx)
            assert len(recs) == 6
            counts = Counter(r.identity for r in recs)
            assert len(counts) == 3
            assert all(c == 2 for c in counts.values())

    def test_epoch_multiset_at_most_once(self):
        stream = generate_stream(4, small_params())
        ds = stream.train[0]
        seen = Counter()
        for idx in PKEpochSampler(ds, 3, 2, np.random.default_rng(2)):
            seen.update(idx.tolist())
        assert max(seen.values()) == 1

    def test_insufficient_data_rejected(self):
        stream = generate_stream(4, small_params(ids_per_domain=2, imgs_per_id=2))
        with pytest.raises(SamplingError):
            PKEpochSampler(stream.train[0], 4, 2, np.random.default_rng(0))
        with pytest.raises(SamplingError):
            PKEpochSampler(stream.train[0], 2, 3, np.random.default_rng(0))


class TestEmbeddingFiles:
    def test_round_trip_bitwise(self, tmp_path):
        stream = generate_stream(6, small_params())
        ds = stream.seen_tests[0]
        tok, attr, lab = export_domain(ds, tmp_path)
        loaded = ingest_embeddings(tok, attr, lab)
        originals = ds.all()
        assert len(loaded) == len(originals)
        for a, b in zip(originals, loaded.all()):
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.text_attr, b.text_attr)
            assert a.item_id == b.item_id
            assert a.identity == b.identity
            assert a.camera == b.camera
            assert a.domain == b.domain
        assert loaded.domain_id == ds.domain_id
        assert not loaded.has_ownership

    def test_truncated_file_reports_offset(self, tmp_path):
        stream = generate_stream(6, small_params(ids_per_domain=2, imgs_per_id=2))
        tok, attr, lab = export_domain(stream.seen_tests[0], tmp_path)
        raw = tok.read_bytes()
        tok.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(IngestError, match="byte offset"):
            read_token_file(tok)

    def test_bad_magic_rejected(self, tmp_path):
        stream = generate_stream(6, small_params(ids_per_domain=2, imgs_per_id=2))
        tok, attr, lab = export_domain(stream.seen_tests[0], tmp_path)
        with pytest.raises(IngestError, match="magic"):
            ingest_embeddings(attr, attr, lab)

    def test_count_disagreement_rejected(self, tmp_path):
        stream = generate_stream(6, small_params(ids_per_domain=2, imgs_per_id=2))
        ds = stream.seen_tests[0]
        tok, attr, lab = export_domain(ds, tmp_path)
        recs = ds.all()
        write_attribute_file(attr, np.stack([r.text_attr for r in recs[:-1]]))
        with pytest.raises(IngestError, match="items"):
            ingest_embeddings(tok, attr, lab)

    def test_missing_label_row_rejected(self, tmp_path):
        stream = generate_stream(6, small_params(ids_per_domain=2, imgs_per_id=2))
        ds = stream.seen_tests[0]
        tok, attr, lab = export_domain(ds, tmp_path)
        write_label_file(lab, ds.all()[:-1])
        with pytest.raises(IngestError, match="rows referencing"):
            ingest_embeddings(tok, attr, lab)

    def test_non_finite_value_rejected(self, tmp_path):
        stream = generate_stream(6, small_params(ids_per_domain=2, imgs_per_id=2))
        ds = stream.seen_tests[0]
        tok, attr, lab = export_domain(ds, tmp_path)
        recs = ds.all()
        tokens = np.stack([r.tokens for r in recs])
        tokens[1, 0, 0] = np.nan
        write_token_file(tok, tokens)
        with pytest.raises(IngestError, match="non-finite"):
            ingest_embeddings(tok, attr, lab)
