import pytest

from clopasim.config import ConfigError, Settings, settings


class TestSettings:
    def test_attribute_wins(self, monkeypatch):
        monkeypatch.setenv("CLOPA_OUT_DIR", "/from/env")
        settings.OUT_DIR = "/from/flag"
        assert settings.get("OUT_DIR") == "/from/flag"

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("CLOPA_OUT_DIR", "/from/env")
        assert settings.get("OUT_DIR") == "/from/env"

    def test_only_known_names_read_env(self, monkeypatch):
        monkeypatch.setenv("CLOPA_DEBUG", "1")
        assert settings.get("DEBUG") == "False"
        assert settings.get("NOPE") is None

    def test_thread_count_default(self):
        assert settings.thread_count() == 1

    def test_thread_count_from_env(self, monkeypatch):
        monkeypatch.setenv("CLOPA_THREADS", "4")
        assert settings.thread_count() == 4

    def test_thread_count_invalid(self, monkeypatch):
        monkeypatch.setenv("CLOPA_THREADS", "many")
        with pytest.raises(ConfigError) as info:
            settings.thread_count()
        assert info.value.key == "threads"

    def test_thread_count_zero(self):
        settings.THREADS = 0
        with pytest.raises(ConfigError):
            settings.thread_count()

    def test_reset(self):
        s = Settings()
        s.OUT_DIR = "x"
        s.DEBUG = True
        s.reset()
        assert s.OUT_DIR is None
        assert s.DEBUG is False


class TestConfigError:
    def test_names_key(self):
        exc = ConfigError("trainer.lr", "must be positive")
        assert exc.key == "trainer.lr"
        assert "trainer.lr" in str(exc)
