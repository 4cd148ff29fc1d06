# Tests for the scene data engine
