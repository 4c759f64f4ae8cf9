"""FastAPI application over a running service core."""

from __future__ import annotations

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse

from chainsync import __version__
from chainsync.api_models import (
    AlarmOut,
    BackfillStatus,
    HealthOut,
    QueryRequest,
    QueryResponse,
    RegistrationCreate,
    RegistrationOut,
    SubscriptionCreate,
    SubscriptionOut,
)
from chainsync.core import ServiceCore
from chainsync.errors import (
    ChainsyncError,
    DuplicateRegistrationError,
    DuplicateSchemaError,
    DuplicateSubscriptionError,
    UnknownChainError,
    UnknownJobError,
    UnknownRegistrationError,
    UnknownSubscriptionError,
)

_NOT_FOUND = (UnknownChainError, UnknownRegistrationError, UnknownSubscriptionError, UnknownJobError)
_CONFLICT = (DuplicateRegistrationError, DuplicateSubscriptionError, DuplicateSchemaError)


def create_app(core: ServiceCore) -> FastAPI:
    app = FastAPI(title="chainsync", version=__version__)
    app.state.core = core

    @app.exception_handler(ChainsyncError)
    async def chainsync_error_handler(request: Request, exc: ChainsyncError) -> JSONResponse:
        if isinstance(exc, _NOT_FOUND):
            status = 404
        elif isinstance(exc, _CONFLICT):
            status = 409
        else:
            status = 400
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.exception_handler(ValueError)
    async def value_error_handler(request: Request, exc: ValueError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def _backfill_status(registration_id: str) -> BackfillStatus:
        state = core.registry.backfill_state(registration_id)
        return BackfillStatus(
            planned=state.planned,
            outstanding=sorted(state.outstanding),
            done=sorted(state.done),
            complete=state.complete,
        )

    @app.post("/registrations", response_model=RegistrationOut, status_code=201)
    def create_registration(body: RegistrationCreate) -> RegistrationOut:
        reg = core.register_event(
            body.chain_id,
            body.contract_address,
            body.event_signature,
            body.init_block_height,
            body.mapping_schema.to_domain(),
        )
        return RegistrationOut.from_domain(reg, _backfill_status(reg.registration_id))

    @app.get("/registrations", response_model=list[RegistrationOut])
    def list_registrations(chain_id: str | None = None) -> list[RegistrationOut]:
        return [
            RegistrationOut.from_domain(r, _backfill_status(r.registration_id))
            for r in core.registry.list_registrations(chain_id)
        ]

    @app.get("/registrations/{registration_id}", response_model=RegistrationOut)
    def get_registration(registration_id: str) -> RegistrationOut:
        reg = core.registry.get(registration_id)
        return RegistrationOut.from_domain(reg, _backfill_status(registration_id))

    @app.post("/subscriptions", response_model=SubscriptionOut, status_code=201)
    def create_subscription(body: SubscriptionCreate) -> SubscriptionOut:
        sub = core.subscribe(body.registration_id, body.url)
        return SubscriptionOut.from_domain(sub, with_secret=True)

    @app.delete("/subscriptions/{subscription_id}", response_model=SubscriptionOut)
    def delete_subscription(subscription_id: str) -> SubscriptionOut:
        return SubscriptionOut.from_domain(core.unsubscribe(subscription_id))

    @app.get("/subscriptions", response_model=list[SubscriptionOut])
    def list_subscriptions() -> list[SubscriptionOut]:
        return [SubscriptionOut.from_domain(s) for s in core.registry.list_subscriptions()]

    @app.post("/query", response_model=QueryResponse)
    def query(body: QueryRequest) -> QueryResponse:
        return QueryResponse.from_domain(core.query(body.to_domain()))

    @app.get("/checksums/analytics")
    def checksum_analytics(
        chain_id: str | None = None,
        registration_id: str | None = None,
        from_ts: float | None = None,
        to_ts: float | None = None,
        interval: float = 60.0,
    ) -> dict:
        return core.integrity.checksum_analytics(
            chain_id=chain_id,
            registration_id=registration_id,
            from_ts=from_ts,
            to_ts=to_ts,
            interval=interval,
        )

    @app.get("/alarms", response_model=list[AlarmOut])
    def alarms() -> list[AlarmOut]:
        return [AlarmOut.model_validate(a.to_dict()) for a in core.integrity.alarms()]

    @app.get("/health", response_model=HealthOut)
    def health() -> HealthOut:
        return HealthOut.model_validate(core.health())

    @app.get("/metrics")
    def metrics() -> Response:
        return PlainTextResponse(core.integrity.render_metrics())

    return app
