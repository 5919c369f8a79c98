import pytest

from knowplug.datagen import GeneratorConfig
from knowplug.harness import ensure_data


TINY_GEN = GeneratorConfig(
    n_users=300, n_items=120, n_categories=12, n_shops=25, n_days=8,
    super_impressions_per_user_day=5.0, sub_impressions_per_user_day=1.0,
    seed=90210)


@pytest.fixture(scope="session")
def tiny_bundle(tmp_path_factory):
    """Small dataset for fast functional tests."""
    return ensure_data(tmp_path_factory.mktemp("tiny") / "data", TINY_GEN)


@pytest.fixture(scope="session")
def desk_bundle(tmp_path_factory):
    """The default desk-scale dataset the acceptance criteria run on."""
    return ensure_data(tmp_path_factory.mktemp("desk") / "data", GeneratorConfig(),
                       log_fn=print)


def tiny_extractor(seed=0, tasks=("click", "conversion", "cart"), head=(12, 6, 2),
                   user_dim=6, feature_dim=4, att_hidden=4, vocabs=(40, 30, 8, 6)):
    """Small extractor for gradient and unit work."""
    from knowplug.extractor import ExtractorConfig, ExtractorModel
    u, i, s, c = vocabs
    cfg = ExtractorConfig(user_vocab=u, item_vocab=i, shop_vocab=s, category_vocab=c,
                          user_dim=user_dim, feature_dim=feature_dim,
                          head_dims=tuple(head), att_hidden=att_hidden,
                          tasks=tuple(tasks), seed=seed)
    return ExtractorModel(cfg)


def random_records(rng, n, n_users=40, n_items=30, n_shops=8, n_cats=6,
                   max_behavior=6, day=0, session_span=4, p_click=0.5,
                   p_conv=0.4, p_cart=0.4):
    """Random impression batch with valid label implications and sessions."""
    from knowplug.datagen import ImpressionRecord, RecordBatch
    recs = []
    session_user = {}
    for k in range(n):
        blen = int(rng.integers(0, max_behavior + 1))
        click = int(rng.random() < p_click)
        sess = int(k // session_span)
        if sess not in session_user:
            session_user[sess] = int(rng.integers(0, n_users))
        recs.append(ImpressionRecord(
            domain="super", day=day, session_id=sess,
            user_id=session_user[sess], item_id=int(rng.integers(0, n_items)),
            shop_id=int(rng.integers(0, n_shops)), category_id=int(rng.integers(0, n_cats)),
            behavior_seq=tuple(int(x) for x in rng.integers(0, n_items, blen)),
            click=click,
            conversion=int(click and rng.random() < p_conv),
            cart=int(click and rng.random() < p_cart)))
    return RecordBatch.from_records(recs, window=max_behavior)
