"""Generator layer registry, toy generator, hypernetwork, weight offsets and losses."""
