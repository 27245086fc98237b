import numpy as np
import pytest

from fedgcae.data import ClientDataset
from fedgcae.model import Network, init_params
from fedgcae.personalization import (LatentDataset, PersonalizationConfig, balance_latents, encode_dataset,
                                     fine_tune_head, group_data, personalize_all, personalize_client)


@pytest.fixture(scope="module")
def net():
    return Network("gcae")


@pytest.fixture(scope="module")
def params():
    return init_params("gcae", 0)


def test_encode_dataset(net, params, small_partition):
    c = small_partition.clients[0]
    lat = encode_dataset(net, params, c, batch_size=7)
    assert lat.Z.shape == (len(c), 200)
    np.testing.assert_array_equal(lat.y, c.y)
    np.testing.assert_allclose(lat.Z[:3], net.forward(params, c.X[:3])[0], atol=1e-14)
    dup = ClientDataset(0, np.repeat(c.X[:1], 2, axis=0), [1, 1], [0, 0], [0, 1])
    z = encode_dataset(net, params, dup).Z
    np.testing.assert_array_equal(z[0], z[1])


def test_zero_epochs_is_identity(net, params):
    lat = LatentDataset(np.ones((3, 200)), np.array([0, 1, 2]), 0)
    out = fine_tune_head(net, params, lat, PersonalizationConfig(epochs=0))
    np.testing.assert_array_equal(out, params)


def test_only_head_changes(net, params, small_partition):
    out = personalize_client(net, params, small_partition.clients[1], PersonalizationConfig(epochs=2))
    segs = net.segments
    np.testing.assert_array_equal(out[segs["encoder"]], params[segs["encoder"]])
    np.testing.assert_array_equal(out[segs["decoder"]], params[segs["decoder"]])
    assert not np.array_equal(out[segs["head"]], params[segs["head"]])


def test_separable_toy_reaches_full_training_accuracy(net, params):
    rng = np.random.default_rng(0)
    n = 40
    y = np.repeat([0, 1], n // 2)
    Z = rng.normal(size=(n, 200)) * 0.1
    Z[:, 0] += np.where(y == 0, -1.0, 1.0)
    lat = LatentDataset(Z, y, 0)
    out = fine_tune_head(net, params, lat, PersonalizationConfig(epochs=50))
    pred = net.head_logits(out, Z).argmax(axis=1)
    assert np.mean(pred == y) == 1.0


def test_balanced_client_smote_is_identity():
    Z = np.arange(40.0).reshape(20, 2)
    lat = LatentDataset(Z, np.arange(20) % 10, 3)
    bal = balance_latents(lat)
    np.testing.assert_array_equal(bal.Z, Z)
    assert not bal.synthetic.any()


def test_balance_reaches_max_count(net, params, small_partition):
    c = small_partition.clients[2]
    bal = balance_latents(encode_dataset(net, params, c))
    hist = bal.class_histogram
    assert np.all(hist == c.class_histogram.max())


def test_two_clients_keep_identical_encoders(net, params, small_partition):
    a = personalize_client(net, params, small_partition.clients[0], PersonalizationConfig(epochs=1))
    b = personalize_client(net, params, small_partition.clients[3], PersonalizationConfig(epochs=1))
    enc = net.segments["encoder"]
    np.testing.assert_array_equal(a[enc], b[enc])
    assert not np.array_equal(a, b)


def test_deterministic(net, params, small_partition):
    cfg = PersonalizationConfig(epochs=1, seed=4)
    a = personalize_client(net, params, small_partition.clients[0], cfg)
    b = personalize_client(net, params, small_partition.clients[0], cfg)
    np.testing.assert_array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        PersonalizationConfig(level="street")
    with pytest.raises(ValueError):
        PersonalizationConfig(batch_size=0)


def test_empty_dataset_rejected(net, params):
    with pytest.raises(ValueError):
        fine_tune_head(net, params, LatentDataset(np.zeros((0, 200)), np.zeros(0, int), 0), PersonalizationConfig())


def test_user_and_home_grouping(small_home_partition):
    users = group_data(small_home_partition, "user")
    assert sorted(users) == [0, 1, 2, 3]
    for u, (members, d) in users.items():
        assert members == [u] and set(d.user_ids.tolist()) == {u} and len(d) == 100
    homes = group_data(small_home_partition, "home")
    assert len(homes) == 2
    for h, (members, d) in homes.items():
        assert members == small_home_partition.homes[h]
        assert len(d) == 100 * len(members)


def test_personalize_all_home_level_shares_model(net, params, small_home_partition):
    res = personalize_all(net, params, small_home_partition, PersonalizationConfig(epochs=1, level="home"))
    assert len(res) == 2
    assert sorted(u for r in res for u in r.members) == [0, 1, 2, 3]
    for r in res:
        assert set(r.pre_accuracy) == set(r.post_accuracy) == set(r.members)
