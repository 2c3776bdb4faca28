"""Why a free center per class is not enough.

Minimizing a center loss over points and their center drives every point onto
the center.  The episode loss with several classes has no such solution
because the classes compete for posterior mass.
"""

from shotfree import collapse_demo

center = collapse_demo(n_points=10, d=2, steps=2000, lr=0.1, seed=0, objective="center")
episode = collapse_demo(n_points=10, d=2, steps=2000, lr=0.1, seed=0, objective="episode", num_classes=2)

for res in (center, episode):
    first, last = res.trajectory[0], res.trajectory[-1]
    print("%-8s spread %.3g -> %.3g   loss %.3g -> %.3g" % (res.objective, first[2], last[2], first[1], last[1]))
