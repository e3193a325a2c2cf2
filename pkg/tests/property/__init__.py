"""Property-based tests for Stoch-Future"""
