"""Count-based targeted-ad detection with privacy-preserving user counts.

Clients count on how many domains they saw each ad; a server learns how many
users saw each ad only through a count-min sketch summed from blinded
per-user reports, with ad URLs mapped to ids by a blind-RSA OPRF.
"""

__version__ = "0.1.0"
