"""Learning-from-demonstration workbench.

Records teleoperated demonstration traces in a deterministic 2D inspection
world, infers the goals and proportional controllers behind them with a
particle filter guided by an attribution prior, compresses the goal sequence
into a readable program, trains per-transition behavioral predictors for
model-predictive playback, and explains the learned behavior with occlusion
saliency and counterfactual scene edits.
"""

__version__ = "0.1.0"
