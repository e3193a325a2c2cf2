"""Unit tests for Stoch-Future"""
