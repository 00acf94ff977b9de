"""
Test suite for nearquery
"""
