# %% [markdown]
# # Pose-graph optimisation and PGBA rewrites
#
# The coordinator's unknowns are one similarity correction per submap,
# mapping submap-local coordinates into the global frame.  Odometry links
# consecutive submaps of one agent; verified registrations link agents.
# Levenberg-Marquardt minimises robust residuals of every edge, with the
# first submap pinned to identity.

# %%
import numpy as np

from sim3fuse import liegroup as lg
from sim3fuse.liegroup import Sim3
from sim3fuse.posegraph import TEMPORAL, VERIFIED, GraphConfig, GraphEdge, RigidityReport, SubmapGraph, geo_residual

rng = np.random.default_rng(3)
cfg = GraphConfig()

# %% [markdown]
# Ground truth: two agents with five submaps each.

# %%
truth = {(0, 0): Sim3.identity()}
for a in range(2):
    for l in range(5):
        truth.setdefault((a, l), lg.exp(rng.normal(scale=[1, 1, 1, 0.5, 0.5, 0.5, 0.3])))

g = SubmapGraph(cfg)
for k in sorted(truth):
    g.add_node(k, truth[k] @ lg.exp(rng.normal(scale=0.1, size=7)) if k != (0, 0) else truth[k])
for a in range(2):
    for l in range(4):
        s, t = (a, l), (a, l + 1)
        g.add_edge(GraphEdge(TEMPORAL, s, t, truth[t].inverse() @ truth[s], cfg.w_temporal))
for l in (0, 2, 4):
    s, t = (1, l), (0, l)
    g.add_edge(GraphEdge(VERIFIED, s, t, truth[t].inverse() @ truth[s], cfg.w_verified, 0.0))

print("initial cost", g.total_cost())
res = g.solve()
print("final cost", res.final_cost, "after", res.evaluations, "evaluations:", res.reason)
err = max(np.abs(lg.log(truth[k].inverse() @ C)).max() for k, C in g.corrections().items())
print("largest tangent error to truth", err)

# %% [markdown]
# An agent's internal bundle adjustment may later move a frozen submap.  If
# the move is a single similarity (small rigidity residual), the edges
# touching the submap are rewritten in closed form and stay consistent.

# %%
def residual_norms(graph):
    C = graph.corrections()
    return [float(np.linalg.norm(geo_residual(e, C[e.src], C[e.tgt]))) for e in graph.edges]

delta = lg.exp(rng.normal(scale=0.05, size=7))
muts = g.apply_pgba_rewrite(RigidityReport((1, 2), delta, 0.01))
print([m for _, m in muts])
print("max residual after rigid rewrite", max(residual_norms(g)))

# %% [markdown]
# A non-rigid move invalidates the submap's verified edges and queues them
# for re-verification against the agent's next summary.

# %%
muts = g.apply_pgba_rewrite(RigidityReport((1, 4), delta, 0.3))
print([(e.src, e.tgt, m) for e, m in muts])
print("re-verification queue", [(e.src, e.tgt) for e in g.reverify_queue])
