import contextlib
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional

from git import InvalidGitRepositoryError, NoSuchPathError, Repo

logger = getLogger(__name__)


@dataclass(frozen=True)
class SourceRevision:
    sha: Optional[str]
    dirty: Optional[bool]


class SourceTracker:
    "Looks up the git revision of the source tree that produced a run"

    def __init__(self, path: Path):
        self.path = path
        self._repo: Optional[Repo] = None
        with contextlib.suppress(RuntimeError):
            self._repo = self._get_repo()

    def _get_repo(self) -> Repo:
        try:
            repo = Repo(self.path, search_parent_directories=True)
        except (InvalidGitRepositoryError, NoSuchPathError) as err:
            msg = f"Not a git repository: {self.path}"
            raise RuntimeError(msg) from err
        return repo

    def is_git_repository(self) -> bool:
        return self._repo is not None

    def get_head_commit_sha(self) -> Optional[str]:
        """Get the commit SHA for the repository HEAD, or None without commits or repository."""
        if self._repo is None:
            return None
        try:
            return self._repo.head.commit.hexsha
        except ValueError:
            return None

    def is_dirty(self) -> Optional[bool]:
        if self._repo is None:
            return None
        return bool(self._repo.is_dirty(untracked_files=False))

    def revision(self) -> SourceRevision:
        return SourceRevision(sha=self.get_head_commit_sha(), dirty=self.is_dirty())

    def close(self) -> None:
        if self._repo is not None:
            self._repo.close()
            self._repo = None


def current_revision(path: Optional[Path] = None) -> SourceRevision:
    """Revision of the package source, falling back to (None, None) outside a repository."""
    tracker = SourceTracker(path or Path(__file__).resolve().parent)
    try:
        rev = tracker.revision()
    finally:
        tracker.close()
    if rev.sha is None:
        logger.debug("No git revision available for %s", tracker.path)
    return rev
