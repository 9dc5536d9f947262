"""Desk-scale laboratory for demand-driven object navigation.

Modules:
    worldcore    procedural rooms, kinematics, visibility, box projection
    demands      synthetic demand/object semantics and embeddings
    perception   synthetic k-candidate detector
    attribute    demand-conditioned contrastive attribute features
    expert       lattice planner and demonstration collection
    policy       navigation policy and baseline agents
    grounding    demand-based detection selection at Done
    evalharness  episode runner and NSR/NSPL/SSR metrics
    cli          end-to-end pipeline commands
"""

__version__ = "0.1.0"
