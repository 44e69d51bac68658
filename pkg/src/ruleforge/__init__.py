"""Query-rewrite-rule discovery engine.

Enumerates symbolic plan templates, verifies rewrite-rule equivalence under
bag semantics on bounded databases, prunes redundant rules, and ranks rules
with a gradient-boosted learning-to-rank model.
"""

__version__ = "0.1.0"
