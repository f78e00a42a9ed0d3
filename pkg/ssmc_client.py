#!/usr/bin/env python3
"""
SuiteSparse Matrix Collection client
Downloads Matrix Market archives by Group/Name and keeps the extracted .mtx files in a local cache.
"""

import logging
import os
import re
import tarfile
import tempfile
from typing import Any, Dict, Optional

import requests

from tuner_config import TunerSettings
from tuner_errors import SsmcDownloadError

logger = logging.getLogger(__name__)

_NAME = re.compile(r'^(?!\.+$)[A-Za-z0-9_.+-]+$')


class SsmcClient:
    """
    Fetches matrices from the SuiteSparse collection.

    Archives live at `<base_url>/MM/<group>/<name>.tar.gz` and contain
    `<name>/<name>.mtx`; the matrix is cached as `<cache_dir>/<group>/<name>.mtx`.
    """

    def __init__(self, base_url: str = "https://sparse.tamu.edu", cache_dir: str = os.path.join("artifacts", "ssmc"),
                 timeout: float = 60.0, session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip('/')
        self.cache_dir = cache_dir
        self.timeout = timeout
        self.session = session or requests.Session()

    @classmethod
    def from_settings(cls, settings: TunerSettings) -> "SsmcClient":
        return cls(base_url=settings.ssmc_base_url, cache_dir=settings.ssmc_cache_dir,
                   timeout=settings.http_timeout)

    def cached_path(self, group: str, name: str) -> str:
        return os.path.join(self.cache_dir, group, f"{name}.mtx")

    def _request(self, method: str, url: str, **kwargs) -> requests.Response:
        try:
            response = self.session.request(method, url, timeout=self.timeout, **kwargs)
            response.raise_for_status()
            return response
        except requests.HTTPError as e:
            status = e.response.status_code if e.response is not None else None
            if status == 404:
                raise SsmcDownloadError(f"matrix not found: {url}")
            raise SsmcDownloadError(f"HTTP error {status} for {url}")
        except requests.RequestException as e:
            raise SsmcDownloadError(f"Request failed for {url}: {e}")

    def fetch_matrix(self, group: str, name: str) -> str:
        """
        Path of the cached .mtx for Group/Name, downloading it when missing.

        Args:
            group: Collection group, e.g. "HB"
            name: Matrix name, e.g. "bcsstk01"

        Returns:
            Local path of the Matrix Market file
        """
        for part in (group, name):
            if not _NAME.match(part):
                raise SsmcDownloadError(f"invalid matrix identifier '{group}/{name}'")
        target = self.cached_path(group, name)
        if os.path.exists(target):
            logger.debug(f"Using cached matrix {target}")
            return target

        url = f"{self.base_url}/MM/{group}/{name}.tar.gz"
        logger.info(f"📥 Downloading {group}/{name} from {url}")
        response = self._request('GET', url, stream=True)
        os.makedirs(os.path.dirname(target), exist_ok=True)

        with tempfile.TemporaryDirectory(dir=os.path.dirname(target)) as scratch:
            archive_path = os.path.join(scratch, f"{name}.tar.gz")
            try:
                with open(archive_path, 'wb') as f:
                    for chunk in response.iter_content(chunk_size=1 << 20):
                        if chunk:
                            f.write(chunk)
            except requests.RequestException as e:
                raise SsmcDownloadError(f"Download of {group}/{name} interrupted: {e}")
            self._extract(archive_path, name, target)

        logger.info(f"✅ Cached {group}/{name} at {target}")
        return target

    @staticmethod
    def _extract(archive_path: str, name: str, target: str):
        member_name = f"{name}/{name}.mtx"
        try:
            with tarfile.open(archive_path, 'r:gz') as archive:
                try:
                    member = archive.getmember(member_name)
                except KeyError:
                    raise SsmcDownloadError(f"archive has no {member_name}")
                source = archive.extractfile(member)
                if source is None:
                    raise SsmcDownloadError(f"{member_name} in the archive is not a regular file")
                partial = target + ".part"
                with open(partial, 'wb') as out:
                    while True:
                        block = source.read(1 << 20)
                        if not block:
                            break
                        out.write(block)
                os.replace(partial, target)
        except (tarfile.TarError, OSError) as e:
            raise SsmcDownloadError(f"cannot extract {archive_path}: {e}")

    def test_connection(self) -> Dict[str, Any]:
        """
        Check that the collection is reachable.

        Returns:
            Dictionary indicating connection status
        """
        try:
            response = self._request('HEAD', self.base_url, allow_redirects=True)
            return {
                'success': True,
                'message': f'Successfully reached {self.base_url}',
                'status_code': response.status_code,
            }
        except SsmcDownloadError as e:
            return {
                'success': False,
                'error': str(e),
                'message': f'Failed to reach {self.base_url}: {str(e)}'
            }
