from litestar import Request, Response
from litestar.exceptions import HTTPException, NotFoundException, ValidationException
from litestar.exceptions.responses import create_exception_response
from litestar.status_codes import HTTP_409_CONFLICT, HTTP_500_INTERNAL_SERVER_ERROR

from src.backend.lib.exceptions import ContractViolationError, EpochPhaseError, ParseError, UnknownWorkerError


class _HTTPConflictException(HTTPException):
    """Request conflict with the current epoch phase."""

    status_code = HTTP_409_CONFLICT


def exception_handler(request: Request, exc: Exception) -> Response:
    http_exc: type[HTTPException]

    if isinstance(exc, ContractViolationError | ParseError):
        http_exc = ValidationException
    elif isinstance(exc, UnknownWorkerError):
        http_exc = NotFoundException
    elif isinstance(exc, EpochPhaseError):
        http_exc = _HTTPConflictException
    elif isinstance(exc, HTTPException):
        return create_exception_response(request, exc)
    else:
        return create_exception_response(
            request,
            HTTPException(
                status_code=getattr(exc, "status_code", HTTP_500_INTERNAL_SERVER_ERROR),
                detail=str(exc),
            ),
        )

    return create_exception_response(request, http_exc(detail=str(exc)))
