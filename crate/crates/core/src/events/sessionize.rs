//! Grouping flat event logs into [`ImpressionSession`]s and back.

use super::{
    BehaviorKind, EventError, ImpressionSession, InteractionEvent, LiveRoomSnapshot,
    RequestContext, Timestamp, UserProfile,
};
use std::collections::HashMap;

struct OpenSession {
    session: ImpressionSession,
    exited: bool,
}

fn group_name(user: &str, live: &str, request_ts: Timestamp) -> String {
    format!("({user}, {live}, request@{request_ts})")
}

/// Groups events into sessions. Events must be sorted by `ts` (ties in any
/// stable order); a `request` opens a new session for its `(user, live)`
/// pair and every later event of that pair is attributed to the most recent
/// open session. Sessions without an observed exit are closed at
/// `horizon_end` and marked censored.
///
/// Violations of the session invariants (orphan events, duplicate behaviors,
/// behaviors outside `[impression, exit]`, like before click) are rejected,
/// never repaired.
pub fn sessionize(
    events: &[InteractionEvent],
    horizon_end: Timestamp,
) -> Result<Vec<ImpressionSession>, EventError> {
    let mut open: HashMap<(String, String), OpenSession> = HashMap::new();
    let mut done: Vec<ImpressionSession> = Vec::new();
    let mut last_ts = Timestamp(i64::MIN);

    for event in events {
        if event.ts < last_ts {
            return Err(EventError::validation(format!(
                "events not sorted by ts: {} after {}",
                event.ts, last_ts
            )));
        }
        last_ts = event.ts;
        if event.ts > horizon_end {
            return Err(EventError::validation(format!(
                "event at {} lies beyond horizon_end {}",
                event.ts, horizon_end
            )));
        }

        let pair = (event.user_id.clone(), event.live_id.clone());
        if event.kind == BehaviorKind::Request {
            // Re-entry: the previous session of this pair ends. Without an
            // observed exit it stays censored rather than being repaired.
            if let Some(prev) = open.remove(&pair) {
                done.push(finish(prev, horizon_end));
            }
            let ctx = event.context.clone().unwrap_or_default();
            let session = ImpressionSession {
                user: UserProfile {
                    user_id: event.user_id.clone(),
                    gender: ctx.gender,
                    age_bucket: ctx.age_bucket,
                    city: ctx.city,
                    click_anchor_history: ctx.click_anchor_history,
                },
                live: LiveRoomSnapshot {
                    live_id: event.live_id.clone(),
                    live_type: ctx.live_type,
                    anchor_id: event.anchor_id.clone(),
                    anchor_gender: ctx.anchor_gender,
                    anchor_type: ctx.anchor_type,
                    snapshot_ts: event.ts,
                },
                request_ts: event.ts,
                impression_ts: None,
                click_ts: None,
                follow_ts: None,
                like_ts: None,
                exit_ts: None,
                censored: false,
            };
            open.insert(
                pair,
                OpenSession {
                    session,
                    exited: false,
                },
            );
            continue;
        }

        let state = open.get_mut(&pair).ok_or_else(|| {
            EventError::validation(format!(
                "orphan {} event for ({}, {}) at {}: no open session",
                event.kind, event.user_id, event.live_id, event.ts
            ))
        })?;
        let name = group_name(
            &event.user_id,
            &event.live_id,
            state.session.request_ts,
        );
        if state.exited {
            return Err(EventError::validation(format!(
                "{} event at {} after exit in {name}",
                event.kind, event.ts
            )));
        }

        match event.kind {
            BehaviorKind::Request => unreachable!("handled above"),
            BehaviorKind::Impression => {
                if state.session.impression_ts.is_some() {
                    return Err(EventError::validation(format!(
                        "duplicate impression in {name}"
                    )));
                }
                state.session.impression_ts = Some(event.ts);
            }
            BehaviorKind::Click | BehaviorKind::Follow | BehaviorKind::Like => {
                if state.session.impression_ts.is_none() {
                    return Err(EventError::validation(format!(
                        "{} before impression in {name}",
                        event.kind
                    )));
                }
                let slot = match event.kind {
                    BehaviorKind::Click => &mut state.session.click_ts,
                    BehaviorKind::Follow => &mut state.session.follow_ts,
                    BehaviorKind::Like => {
                        match state.session.click_ts {
                            Some(click_ts) if click_ts <= event.ts => {}
                            _ => {
                                return Err(EventError::validation(format!(
                                    "like before click in {name}"
                                )))
                            }
                        }
                        &mut state.session.like_ts
                    }
                    _ => unreachable!(),
                };
                if slot.is_some() {
                    return Err(EventError::validation(format!(
                        "duplicate {} in {name}",
                        event.kind
                    )));
                }
                *slot = Some(event.ts);
            }
            BehaviorKind::Exit => {
                if state.session.impression_ts.is_none() {
                    return Err(EventError::validation(format!(
                        "exit before impression in {name}"
                    )));
                }
                state.session.exit_ts = Some(event.ts);
                state.exited = true;
            }
        }
    }

    for (_, state) in open.drain() {
        done.push(finish(state, horizon_end));
    }

    done.sort_by(|a, b| {
        (a.request_ts, &a.user.user_id, &a.live.live_id)
            .cmp(&(b.request_ts, &b.user.user_id, &b.live.live_id))
    });
    Ok(done)
}

fn finish(state: OpenSession, horizon_end: Timestamp) -> ImpressionSession {
    let mut session = state.session;
    if !state.exited {
        session.censored = true;
        if session.impression_ts.is_some() {
            session.exit_ts = Some(horizon_end);
        }
    }
    session
}

/// Inverse of [`sessionize`]: flattens sessions back into a sorted event
/// list. Censored sessions emit no exit event, so re-sessionizing with the
/// same horizon reproduces the input exactly.
pub fn events_from_sessions(sessions: &[ImpressionSession]) -> Vec<InteractionEvent> {
    let mut events = Vec::new();
    for s in sessions {
        let mk = |kind: BehaviorKind, ts: Timestamp, context: Option<RequestContext>| {
            InteractionEvent {
                kind,
                user_id: s.user.user_id.clone(),
                live_id: s.live.live_id.clone(),
                anchor_id: s.live.anchor_id.clone(),
                ts,
                context,
            }
        };
        events.push(mk(
            BehaviorKind::Request,
            s.request_ts,
            Some(RequestContext {
                gender: s.user.gender.clone(),
                age_bucket: s.user.age_bucket.clone(),
                city: s.user.city.clone(),
                click_anchor_history: s.user.click_anchor_history.clone(),
                live_type: s.live.live_type.clone(),
                anchor_gender: s.live.anchor_gender.clone(),
                anchor_type: s.live.anchor_type.clone(),
            }),
        ));
        if let Some(ts) = s.impression_ts {
            events.push(mk(BehaviorKind::Impression, ts, None));
        }
        if let Some(ts) = s.click_ts {
            events.push(mk(BehaviorKind::Click, ts, None));
        }
        if let Some(ts) = s.follow_ts {
            events.push(mk(BehaviorKind::Follow, ts, None));
        }
        if let Some(ts) = s.like_ts {
            events.push(mk(BehaviorKind::Like, ts, None));
        }
        if !s.censored {
            if let Some(ts) = s.exit_ts {
                events.push(mk(BehaviorKind::Exit, ts, None));
            }
        }
    }
    events.sort_by_key(|e| e.ts);
    events
}
