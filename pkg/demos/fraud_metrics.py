"""Per-card and per-merchant features for a card-fraud model.

Two queries share one five-minute sliding window:

    Q1  SUM(amount), COUNT(*)  GROUP BY card
    Q2  AVG(amount)            GROUP BY merchant

Events go through the full engine: the front-end appends each payment to the
``card`` and ``merchant`` topics, two processor units split the partitions and
every reply joins the fragments from both topics.

    python demos/fraud_metrics.py
"""

import random
import tempfile

from slidewin import StreamConfig
from slidewin.engine import Engine, EngineConfig

STREAM = """
stream_id: payments
schema: {card: str, merchant: str, amount: float}
topics:
  - {name: card, routing_keys: [card], partitions: 4}
  - {name: merchant, routing_keys: [merchant], partitions: 4}
metrics:
  - {metric_id: card_spend_5m, window: {kind: sliding, size_ms: 300000}, group_by: [card], aggregation: sum(amount)}
  - {metric_id: card_txns_5m, window: {kind: sliding, size_ms: 300000}, group_by: [card], aggregation: count(*)}
  - {metric_id: merchant_avg_5m, window: {kind: sliding, size_ms: 300000}, group_by: [merchant], aggregation: avg(amount)}
"""

rng = random.Random(2)
with tempfile.TemporaryDirectory() as root:
    with Engine(EngineConfig(data_root=root, units=2, fsync=False)) as engine:
        engine.add_stream(StreamConfig.loads(STREAM))
        t = 1_700_000_000_000
        for i in range(40):
            t += rng.randrange(5_000, 40_000)
            card = "card-7" if i % 4 == 0 else f"card-{rng.randrange(30)}"
            # card-7 turns into a burst of small test charges near the end
            amount = 1.0 if card == "card-7" and i > 28 else round(rng.lognormvariate(3.5, 1.0), 2)
            fields = {"card": card, "merchant": f"shop-{rng.randrange(4)}", "amount": amount}
            resp = engine.ingest("payments", fields, timestamp=t)
            resp.wait(5)
            v = resp.values
            if card == "card-7":
                print(f"{card} paid {amount:>8.2f} at {fields['merchant']}: "
                      f"{v['card_txns_5m']} txns / {v['card_spend_5m']:.2f} in 5 min, "
                      f"merchant avg {v['merchant_avg_5m']:.2f}")
        print("\nreply collector:", engine.collector.stats)
