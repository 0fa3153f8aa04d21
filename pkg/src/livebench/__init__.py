"""A living synthetic benchmark for meta-analytic publication bias adjustment.

Modules
-------
store        file-backed repository: manifest, CSV schemas, validation
dgm          seed derivation and the step-selection SMD generator
estimators   built-in estimators and the method runner
measures     performance measures with Monte Carlo standard errors
aggregate    missingness strategies, ranking, leaderboards
report       static HTML report
cli          the ``bench`` command
"""

__version__ = "0.1.0"
