import numpy as np
import pytest

from sltpnet import phantom as P
from sltpnet.seeding import substream


def small_spec(**kw):
    base = dict(dims=(96, 96, 96), n_subjects=2, blob_radius=(14.0, 18.0), blobs_per_class=1, seed_spacing=30.0, classes_per_subject=4)
    base.update(kw)
    return P.PhantomSpec(**base)


@pytest.fixture(scope="module")
def subject():
    return P.generate_subject(small_spec(), 0)


def test_deterministic(subject):
    again = P.generate_subject(small_spec(), 0)
    assert again.volume == subject.volume and again.labels == subject.labels
    assert again.uln_pct == subject.uln_pct
    other = P.generate_subject(small_spec(seed=1), 0)
    assert other.volume != subject.volume
    assert np.array_equal(P.generate_label_map(small_spec(), 0), subject.labels.voxels)


def test_labels_inside_lung_and_classes(subject):
    lab, mask = subject.labels.voxels, subject.mask.voxels
    assert np.all(mask[lab > 0] == 1)
    present = set(np.unique(lab).tolist()) - {0}
    assert present == set(P.subject_classes(small_spec(), 0))
    assert subject.volume.voxels.min() >= -1024 and subject.volume.voxels.max() <= 200


def test_class_means_within_sampling_error(subject):
    spec = small_spec()
    hu, lab = subject.volume.voxels.astype(float), subject.labels.voxels
    for k in np.unique(lab[lab > 0]):
        v = hu[lab == k]
        assert abs(v.mean() - spec.class_means[k - 1]) <= 3 * spec.class_sd / np.sqrt(v.size) + 0.5  # +rounding


def test_class_window_covers_all_classes():
    spec = small_spec(classes_per_subject=3)
    seen = [k for i in range(10) for k in P.subject_classes(spec, i)]
    assert np.all(np.bincount(seen, minlength=11)[1:] == 3)
    assert P.subject_classes(P.PhantomSpec(), 7) == list(range(1, 11))


def test_validation():
    with pytest.raises(P.PhantomError):
        P.PhantomSpec(dims=(30, 96, 96)).validate()
    with pytest.raises(P.PhantomError):
        P.PhantomSpec(class_means=tuple(-975.0 + 10 * k for k in range(10))).validate()
    with pytest.raises(P.PhantomError):
        P.PhantomSpec(classes_per_subject=0).validate()


def test_repeat_without_noise_or_jitter_is_identical(subject):
    rep = P.generate_repeat_scan(subject, small_spec(), np.random.default_rng(0), noise_sd=0, jitter=(0, 0, 0))
    assert rep.volume == subject.volume and rep.labels == subject.labels and rep.mask == subject.mask


def test_repeat_jitter_shifts_by_one_voxel(subject):
    rep = P.generate_repeat_scan(subject, small_spec(), np.random.default_rng(0), noise_sd=0, jitter=(1, 0, 0))
    assert np.array_equal(rep.labels.voxels[:, :, 1:], subject.labels.voxels[:, :, :-1])
    assert np.array_equal(rep.volume.voxels[:, :, 1:], subject.volume.voxels[:, :, :-1])
    assert np.all(rep.mask.voxels[:, :, 0] == 0)


def test_repeat_noise_is_zero_mean(subject):
    rep = P.generate_repeat_scan(subject, small_spec(), np.random.default_rng(1), noise_sd=10, jitter=(0, 0, 0))
    diff = rep.volume.voxels.astype(float) - subject.volume.voxels
    lung = subject.mask.voxels.astype(bool)
    d = diff[lung]
    assert abs(d.mean()) <= 3 * 10 / np.sqrt(d.size)
    assert d.std() == pytest.approx(10, rel=0.05)


def test_cohort_round_trip(tmp_path):
    spec = small_spec()
    manifest = P.write_cohort(spec, tmp_path, repeat=True)
    subs = P.read_cohort(manifest)
    reps = P.read_cohort(manifest, repeat=True)
    assert [s.subject_id for s in subs] == ["S0000", "S0001"]
    direct = P.generate_subject(spec, 1)
    assert subs[1].volume == direct.volume and subs[1].labels == direct.labels
    expect = P.generate_repeat_scan(direct, spec, substream(spec.seed, "phantom.repeat", 1))
    assert reps[1].volume == expect.volume
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    P.write_cohort(spec, tmp_path, repeat=True)
    assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}
