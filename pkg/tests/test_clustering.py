"""
Unit tests for latent extraction and k-means.
"""

from itertools import product

import numpy as np
import pytest

from src.clustering import (
    LatentPoint,
    assign_to_nearest,
    best_of_restarts,
    centroids_to_frame,
    cluster_latents,
    elbow_curve,
    infer_latents,
    kmeans_pp_indices,
    kmeans_pp_init,
    latent_matrix,
    lloyd_kmeans,
    profiles_to_frame,
    read_latents,
    reconstruction_accuracy,
    sample_prior,
    write_latents,
)
from src.datagen import Cohort, Disease, default_disease_models, generate_cohort
from src.exceptions import ArtifactParseError, InfeasibleError, ValidationError
from src.trainer import init_params
from src.vae_core import VaeParams


def blobs(centers, per_blob, sigma, seed):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    points = np.vstack([c + sigma * rng.standard_normal((per_blob, centers.shape[1])) for c in centers])
    return points, np.repeat(np.arange(len(centers)), per_blob)


def brute_force_inertia(points):
    """Minimum two-cluster inertia over every labeling with both clusters non-empty."""
    best = np.inf
    for labels in product((0, 1), repeat=len(points)):
        labels = np.array(labels)
        if labels.min() == labels.max():
            continue
        inertia = sum(
            ((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum() for c in (0, 1)
        )
        best = min(best, inertia)
    return best


@pytest.fixture
def latent_points():
    rng = np.random.default_rng(3)
    diseases = [Disease.ARMD, Disease.CSCR, Disease.PCV]
    return [LatentPoint(i, diseases[i % 3], rng.standard_normal(3)) for i in range(12)]


class TestKmeansPlusPlus:
    """Test k-means++ seeding."""

    def test_n_equals_k_is_permutation(self):
        """Test every point is chosen once when N = k."""
        points = np.arange(15, dtype=float).reshape(5, 3)

        indices = kmeans_pp_indices(points, 5, np.random.default_rng(0))

        assert sorted(indices.tolist()) == [0, 1, 2, 3, 4]

    def test_single_centroid_is_a_point(self):
        """Test k = 1 picks one of the points."""
        points = np.random.default_rng(1).standard_normal((10, 2))

        centroids = kmeans_pp_init(points, 1, np.random.default_rng(2))

        assert centroids.shape == (1, 2)
        assert any(np.array_equal(centroids[0], p) for p in points)

    def test_far_pair_is_chosen_second(self):
        """Test the second seed lands in the far pair across many seeds."""
        points = np.array([[0.0, 0.0], [0.0, 0.01], [100.0, 0.0], [100.0, 0.01]])

        for seed in range(200):
            first, second = kmeans_pp_indices(points, 2, np.random.default_rng(seed))
            assert (first < 2) != (second < 2)

    def test_duplicates_fall_back_to_unchosen(self):
        """Test identical points still yield k distinct indices."""
        points = np.zeros((4, 2))

        indices = kmeans_pp_indices(points, 3, np.random.default_rng(5))

        assert len(set(indices.tolist())) == 3

    def test_too_few_points(self):
        """Test N < k is infeasible."""
        with pytest.raises(InfeasibleError, match="Cannot form 3 clusters from 2 points"):
            kmeans_pp_init(np.zeros((2, 3)), 3, np.random.default_rng(0))


class TestAssignToNearest:
    """Test the assignment step."""

    def test_ties_go_to_lowest_index(self):
        """Test a point equidistant from two centroids joins the first."""
        labels, sq_dist = assign_to_nearest(np.array([[0.0]]), np.array([[1.0], [-1.0]]))

        assert labels.tolist() == [0]
        assert sq_dist.tolist() == [1.0]


class TestLloydKmeans:
    """Test Lloyd iterations."""

    def test_two_points(self):
        """Test two points and k = 2 give zero inertia."""
        points = np.array([[0.0, 0.0, 0.0], [10.0, 10.0, 10.0]])

        result = lloyd_kmeans(points, 2, np.random.default_rng(0))

        assert result.inertia == 0.0
        assert sorted(map(tuple, result.centroids)) == [(0.0, 0.0, 0.0), (10.0, 10.0, 10.0)]
        assert result.converged

    @pytest.mark.parametrize("n_points", range(2, 9))
    @pytest.mark.parametrize("fixture_seed", [11, 23, 37])
    def test_matches_brute_force_oracle(self, n_points, fixture_seed):
        """Test small fixtures with k = 2 reach the exhaustive minimum."""
        points = np.random.default_rng(fixture_seed).standard_normal((n_points, 2))

        result = best_of_restarts(points, 2, seed=0, restarts=20)

        assert result.inertia == pytest.approx(brute_force_inertia(points), rel=1e-9, abs=1e-9)

    def test_recovers_fourteen_blobs(self):
        """Test well-separated blobs are recovered exactly."""
        centers = [(2.0 * (i % 3), 2.0 * ((i // 3) % 3), 2.0 * (i // 9)) for i in range(14)]
        points, truth = blobs(centers, 50, 0.01, seed=4)

        result = best_of_restarts(points, 14, seed=0, restarts=5)

        for blob in range(14):
            assert len(set(result.assignments[truth == blob].tolist())) == 1
        assert len(set(result.assignments.tolist())) == 14

    def test_point_order_does_not_change_partition(self):
        """Test permuted points started from the same centroids give the same partition."""
        points = np.random.default_rng(15).standard_normal((40, 3))
        order = np.random.default_rng(16).permutation(40)
        init = kmeans_pp_init(points, 4, np.random.default_rng(17))

        original = lloyd_kmeans(points, 4, np.random.default_rng(0), init=init)
        permuted = lloyd_kmeans(points[order], 4, np.random.default_rng(0), init=init)

        def partition(labels, ids):
            return {frozenset(ids[labels == c].tolist()) for c in np.unique(labels)}

        assert partition(original.assignments, np.arange(40)) == partition(permuted.assignments, order)
        assert permuted.inertia == pytest.approx(original.inertia, rel=1e-12)

    def test_inertia_never_increases(self):
        """Test recorded inertia is non-increasing."""
        points = np.random.default_rng(8).standard_normal((200, 3))

        result = lloyd_kmeans(points, 5, np.random.default_rng(9))

        history = np.array(result.inertia_history)
        assert np.all(np.diff(history) <= 1e-9 * history[0])
        assert result.inertia == history[-1]

    def test_assignments_are_nearest(self):
        """Test every point sits with its nearest final centroid."""
        points = np.random.default_rng(10).standard_normal((100, 2))

        result = lloyd_kmeans(points, 4, np.random.default_rng(0))

        distances = ((points[:, None, :] - result.centroids[None]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(result.assignments, distances.argmin(axis=1))

    def test_converged_result_is_a_fixed_point(self):
        """Test restarting from converged centroids changes nothing."""
        points = np.random.default_rng(12).standard_normal((60, 3))
        first = lloyd_kmeans(points, 3, np.random.default_rng(0))

        second = lloyd_kmeans(points, 3, np.random.default_rng(1), init=first.centroids)

        assert second.iterations == 1
        np.testing.assert_array_equal(second.assignments, first.assignments)
        np.testing.assert_allclose(second.centroids, first.centroids, atol=1e-9)

    def test_deterministic(self):
        """Test a fixed seed gives identical results."""
        points = np.random.default_rng(13).standard_normal((50, 2))

        first = lloyd_kmeans(points, 4, np.random.default_rng(7))
        second = lloyd_kmeans(points, 4, np.random.default_rng(7))

        np.testing.assert_array_equal(first.centroids, second.centroids)
        np.testing.assert_array_equal(first.assignments, second.assignments)

    def test_k_one_is_the_mean(self):
        """Test k = 1 puts every point in cluster 0 at the mean."""
        points = np.random.default_rng(14).standard_normal((30, 2))

        result = lloyd_kmeans(points, 1, np.random.default_rng(0))

        assert not result.assignments.any()
        np.testing.assert_allclose(result.centroids[0], points.mean(axis=0))

    def test_empty_clusters_are_reseeded(self):
        """Test empty clusters move to distinct far points and end non-empty."""
        points = np.array([[0.0], [1.0], [10.0], [11.0]])
        init = np.array([[0.5], [10.5], [1000.0], [2000.0]])

        result = lloyd_kmeans(points, 4, np.random.default_rng(0), init=init)

        assert np.bincount(result.assignments, minlength=4).tolist() == [1, 1, 1, 1]
        assert result.inertia == 0.0

    def test_too_few_points(self):
        """Test N < k is infeasible."""
        with pytest.raises(InfeasibleError):
            lloyd_kmeans(np.zeros((3, 2)), 4, np.random.default_rng(0))

    def test_invalid_k(self):
        """Test k = 0 is rejected."""
        with pytest.raises(ValidationError):
            lloyd_kmeans(np.zeros((3, 2)), 0, np.random.default_rng(0))

    def test_init_shape_checked(self):
        """Test a wrongly shaped init is rejected."""
        with pytest.raises(ValidationError, match="init must have shape"):
            lloyd_kmeans(np.zeros((3, 2)), 2, np.random.default_rng(0), init=np.zeros((2, 3)))


class TestBestOfRestarts:
    """Test restarts and the elbow curve."""

    def test_no_worse_than_single_run(self):
        """Test more restarts never raise the best inertia."""
        points = np.random.default_rng(15).standard_normal((80, 2))

        one = best_of_restarts(points, 6, seed=3, restarts=1)
        many = best_of_restarts(points, 6, seed=3, restarts=8)

        assert many.inertia <= one.inertia

    def test_restarts_validated(self):
        """Test restarts must be positive."""
        with pytest.raises(ValidationError):
            best_of_restarts(np.zeros((3, 2)), 1, seed=0, restarts=0)

    def test_elbow_skips_infeasible_k(self):
        """Test k above the point count is left out."""
        points = np.array([[0.0], [1.0], [5.0], [6.0]])

        frame = elbow_curve(points, [1, 2, 4, 5], seed=0)

        assert frame["k"].tolist() == [1, 2, 4]
        assert frame["inertia"].tolist() == pytest.approx([26.0, 1.0, 0.0])


class TestInferLatents:
    """Test posterior means as latent points."""

    def test_zero_params_give_zero_means(self):
        """Test an all-zero network maps every record to the origin."""
        cohort = generate_cohort(default_disease_models(), 2, seed=0)

        points = infer_latents(VaeParams.zeros(3, 8), cohort, 110.0)

        assert [p.id for p in points] == [r.id for r in cohort.records]
        assert [p.disease for p in points] == [r.disease for r in cohort.records]
        assert not latent_matrix(points).any()
        assert all(p.cluster is None for p in points)

    def test_identical_records_identical_latents(self):
        """Test duplicate records encode identically."""
        record = generate_cohort(default_disease_models(), 1, seed=1).records[0]
        cohort = Cohort(records=(record, record))

        first, second = infer_latents(init_params(2, 16, seed=0), cohort, 110.0)

        np.testing.assert_array_equal(first.mu, second.mu)

    def test_empty_cohort(self):
        """Test an empty cohort yields no points."""
        assert infer_latents(VaeParams.zeros(2, 4), Cohort(records=()), 110.0) == []


class TestClusterLatents:
    """Test clustering latent points."""

    def test_attaches_clusters(self, latent_points, mocker):
        """Test ids and diseases are kept and a cluster is attached."""
        logger = mocker.MagicMock()

        assigned, result = cluster_latents(latent_points, k=3, seed=0, logger=logger)

        assert [p.id for p in assigned] == [p.id for p in latent_points]
        assert [p.cluster for p in assigned] == result.assignments.tolist()
        assert latent_points[0].cluster is None
        fields = logger.info.call_args.kwargs["extra"]["fields"]
        assert sum(fields["cluster_sizes"]) == 12

    def test_k_above_count(self, latent_points, mocker):
        """Test k above the number of points is infeasible."""
        with pytest.raises(InfeasibleError):
            cluster_latents(latent_points, k=13, logger=mocker.MagicMock())


class TestLatentsCsv:
    """Test latents and centroids CSV."""

    def test_round_trip(self, tmp_path, latent_points):
        """Test means and clusters survive the CSV exactly."""
        points = [
            LatentPoint(p.id, p.disease, p.mu, cluster=(p.id % 2 if p.id < 6 else None))
            for p in latent_points
        ]

        path = write_latents(tmp_path / "latents.csv", points)
        loaded = read_latents(path)

        assert path.read_text().splitlines()[0] == "id,disease,z1,z2,z3,cluster"
        assert [p.cluster for p in loaded] == [p.cluster for p in points]
        for original, parsed in zip(points, loaded):
            assert parsed.id == original.id
            assert parsed.disease == original.disease
            np.testing.assert_array_equal(parsed.mu, original.mu)

    def test_wrong_header(self, tmp_path):
        """Test a header without z columns is rejected."""
        path = tmp_path / "latents.csv"
        path.write_text("id,disease,cluster\n0,ARMD,1\n")

        with pytest.raises(ArtifactParseError, match="Expected header"):
            read_latents(path)

    def test_bad_value_names_line(self, tmp_path):
        """Test malformed values report their line."""
        path = tmp_path / "latents.csv"
        path.write_text("id,disease,z1,cluster\n0,ARMD,0.5,\n1,ARMD,abc,\n")

        with pytest.raises(ArtifactParseError) as excinfo:
            read_latents(path)

        assert excinfo.value.context["line"] == 3

    def test_unknown_disease(self, tmp_path):
        """Test an unknown disease code is rejected."""
        path = tmp_path / "latents.csv"
        path.write_text("id,disease,z1,cluster\n0,AMD,0.5,\n")

        with pytest.raises(ArtifactParseError, match="Line 2"):
            read_latents(path)

    def test_non_finite_latent(self, tmp_path):
        """Test NaN latents are rejected."""
        path = tmp_path / "latents.csv"
        path.write_text("id,disease,z1,cluster\n0,PCV,nan,0\n")

        with pytest.raises(ArtifactParseError, match="non-finite"):
            read_latents(path)

    def test_centroids_frame(self):
        """Test centroid rows are numbered from 0."""
        frame = centroids_to_frame(np.array([[0.5, -1.0], [2.0, 0.25]]))

        assert list(frame.columns) == ["cluster", "z1", "z2"]
        assert frame["cluster"].tolist() == ["0", "1"]
        assert frame["z2"].tolist() == ["-1.0", "0.25"]


class TestDecoderUses:
    """Test reconstruction accuracy and prior sampling."""

    def test_reconstruction_accuracy_keys(self):
        """Test each field gets an accuracy in [0, 1] and age an error in years."""
        cohort = generate_cohort(default_disease_models(), 3, seed=2)

        report = reconstruction_accuracy(init_params(2, 16, seed=0), cohort, 110.0)

        assert sorted(report) == ["age_mae", "drusen", "polyps", "race", "sex", "srh"]
        for name in ("race", "polyps", "drusen", "srh", "sex"):
            assert 0.0 <= report[name] <= 1.0
        assert report["age_mae"] >= 0.0

    def test_reconstruction_accuracy_empty(self):
        """Test an empty cohort is rejected."""
        with pytest.raises(ValidationError):
            reconstruction_accuracy(VaeParams.zeros(2, 4), Cohort(records=()), 110.0)

    def test_sample_prior(self):
        """Test n profiles decode with no disease label."""
        profiles = sample_prior(init_params(3, 16, seed=0), 5, np.random.default_rng(0), 110.0)

        assert [p.id for p in profiles] == [0, 1, 2, 3, 4]
        assert all(p.disease is None for p in profiles)
        assert all(0 < p.age <= 110.0 for p in profiles)

    def test_sample_prior_count_validated(self):
        """Test n must be positive."""
        with pytest.raises(ValidationError):
            sample_prior(VaeParams.zeros(2, 4), 0, np.random.default_rng(0), 110.0)

    def test_profiles_frame_drops_disease(self):
        """Test sampled profiles are written without the disease column."""
        profiles = sample_prior(VaeParams.zeros(2, 4), 2, np.random.default_rng(0), 110.0)

        frame = profiles_to_frame(profiles)

        assert list(frame.columns) == ["id", "race", "age", "polyps", "drusen", "srh", "sex"]
        assert frame["age"].tolist() == ["55.0000", "55.0000"]
