"""Traffic-pattern client selection for federated learning.

Users are characterized by expected packet count and burstiness derived
from their link and packet-size parameters, grouped by a multinomial
logistic regression classifier, and same-group cohorts are selected for
FedAvg rounds.
"""

__version__ = "0.1.0"
