"""
Looking inside one manifold graph
=================================

Each instance gets its own graph: one node for the instance, one per
prototype. The edge matrix is a row-wise softmax with the diagonal masked.
"""

import numpy as np

from manifold_ssl.config import RunConfig
from manifold_ssl.evaluation import export_adjacency, run_experiment

res = run_experiment(RunConfig({"train.iters": 300, "encoder.hidden_dims": "32",
                                "encoder.feature_dim": 16, "proto.k": 3, "proto.embed_dim_k": 8,
                                "proto.embed_dim_c": 8, "proto.mlp_hidden": "32",
                                "train.batch_labeled": 6, "train.batch_unlabeled": 32,
                                "vat.eps": 0.25}))

x = res.test_set.X[0]
print("instance", x, "true class", res.test_set.y[0])
rows = [line.split(",") for line in export_adjacency(res.model, x).splitlines()[1:]]
w = np.array([[float(v) for v in r[2:]] for r in rows])

# row 0 is where the instance sends its attention
print("instance -> prototypes", np.round(w[0, 1:], 3))
print("row sums", np.round(w.sum(axis=1), 12))
