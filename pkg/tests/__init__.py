# Tests for database service 