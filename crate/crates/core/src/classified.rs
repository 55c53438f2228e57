//! Classified reallocation.
//!
//! Clients are grouped by (power-of-two) laxity: a `w`-channel serves up to
//! `w` clients of laxity `w`, each transmitting every `w` slots. Clients whose
//! laxity is at least the threshold `tau = 2 * hyperceiling(n)` share a single
//! big channel at period `tau / 2`, which has room for all `n` clients. When
//! `n` crosses a power of two, `tau` follows it: growing evicts big-channel
//! clients that can no longer wait `tau / 2`, shrinking pulls clients of
//! laxity above `2 tau` into the big channel.

use std::collections::{BTreeMap, HashMap};

use crate::model::{hyperceiling, ChannelId, Client, ClientId, Placement, ReallocationRecord, Time};
use crate::policy::{EventCtx, Policy, PolicyError, PolicyFacts, StepOutcome, Witness};

const BIG: ChannelId = ChannelId(0);

/// Free offset in `[0, period)` whose next firing at or after `now` comes
/// first. `None` when every offset is taken.
pub fn assign_offset<F: Fn(u64) -> bool>(period: u64, now: Time, taken: F) -> Option<u64> {
    (0..period).map(|k| (now + k) % period).find(|&o| !taken(o))
}

#[derive(Debug, Clone)]
struct Member {
    client: ClientId,
    laxity: u64,
    placed_at: Time,
    /// Active clients right after this member was last allocated to a channel.
    alloc_n: usize,
}

impl Member {
    // Last firing strictly before `now` on the given schedule, or the time the
    // member was placed if it has not fired there yet.
    fn reference(&self, period: u64, offset: u64, now: Time) -> Time {
        if now == 0 {
            return self.placed_at;
        }
        let back = ((now - 1) % period + period - offset % period) % period;
        match (now - 1).checked_sub(back) {
            Some(last) if last >= self.placed_at => last,
            _ => self.placed_at,
        }
    }
}

/// Channel reserved for clients of one laxity. Members are keyed by offset.
#[derive(Debug, Clone)]
pub struct WChannel {
    id: ChannelId,
    w: u64,
    members: BTreeMap<u64, Member>,
}

impl WChannel {
    pub fn id(&self) -> ChannelId {
        self.id
    }

    pub fn laxity(&self) -> u64 {
        self.w
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() as u64 >= self.w
    }

    pub fn clients(&self) -> impl Iterator<Item = (u64, ClientId)> + '_ {
        self.members.iter().map(|(&o, m)| (o, m.client))
    }

    fn offset_of(&self, client: ClientId) -> Option<u64> {
        self.members.iter().find(|(_, m)| m.client == client).map(|(&o, _)| o)
    }
}

#[derive(Debug, Clone)]
pub struct BigChannel {
    tau: u64,
    members: BTreeMap<u64, Member>,
}

impl BigChannel {
    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn period(&self) -> u64 {
        self.tau / 2
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn clients(&self) -> impl Iterator<Item = (u64, ClientId, u64)> + '_ {
        self.members.iter().map(|(&o, m)| (o, m.client, m.laxity))
    }

    fn offset_of(&self, client: ClientId) -> Option<u64> {
        self.members.iter().find(|(_, m)| m.client == client).map(|(&o, _)| o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Location {
    Big,
    Small { w: u64, channel: ChannelId },
}

#[derive(Debug, Clone)]
pub struct ClassifiedState {
    big: BigChannel,
    pools: BTreeMap<u64, Vec<WChannel>>,
    location: HashMap<ClientId, Location>,
    n: usize,
    next_channel: u32,
    big_enabled: bool,
    strict_pow2: bool,
}

impl ClassifiedState {
    /// With `big_enabled = false` every client goes to a laxity channel and
    /// `tau` is never used.
    pub fn new(big_enabled: bool, strict_pow2: bool) -> Self {
        ClassifiedState {
            big: BigChannel { tau: 2, members: BTreeMap::new() },
            pools: BTreeMap::new(),
            location: HashMap::new(),
            n: 0,
            next_channel: 1,
            big_enabled,
            strict_pow2,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> u64 {
        self.big.tau
    }

    pub fn big(&self) -> &BigChannel {
        &self.big
    }

    pub fn pool(&self, w: u64) -> &[WChannel] {
        self.pools.get(&w).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pools(&self) -> impl Iterator<Item = &WChannel> {
        self.pools.values().flatten()
    }

    pub fn channel_count(&self) -> usize {
        self.pools.values().map(Vec::len).sum::<usize>() + usize::from(!self.big.is_empty())
    }

    pub fn placement_of(&self, client: ClientId) -> Option<Placement> {
        match *self.location.get(&client)? {
            Location::Big => {
                Some(Placement { client, channel: BIG, period: self.big.period(), offset: self.big.offset_of(client)? })
            }
            Location::Small { w, channel } => {
                let ch = self.pool(w).iter().find(|c| c.id == channel)?;
                Some(Placement { client, channel, period: w, offset: ch.offset_of(client)? })
            }
        }
    }

    /// Non-full `w`-channel with the fewest members, lowest id on ties.
    pub fn pick_min_load_wchannel(&self, w: u64) -> Option<ChannelId> {
        self.pool(w).iter().filter(|c| !c.is_full()).min_by_key(|c| (c.len(), c.id)).map(|c| c.id)
    }

    fn wchannel_mut(&mut self, w: u64, id: ChannelId) -> &mut WChannel {
        self.pools.get_mut(&w).and_then(|p| p.iter_mut().find(|c| c.id == id)).expect("channel exists in its pool")
    }

    fn release(&mut self, w: u64, id: ChannelId) {
        if let Some(pool) = self.pools.get_mut(&w) {
            pool.retain(|c| c.id != id);
            if pool.is_empty() {
                self.pools.remove(&w);
            }
        }
    }

    // Minimum-load `w`-channel, reserving a new one when all are full.
    fn place_small(&mut self, mut member: Member, now: Time) -> Placement {
        let w = member.laxity;
        let id = match self.pick_min_load_wchannel(w) {
            Some(id) => id,
            None => {
                let id = ChannelId(self.next_channel);
                self.next_channel += 1;
                self.pools.entry(w).or_default().push(WChannel { id, w, members: BTreeMap::new() });
                id
            }
        };
        let ch = self.wchannel_mut(w, id);
        let offset = assign_offset(w, now, |o| ch.members.contains_key(&o)).expect("channel has room");
        let client = member.client;
        member.placed_at = now;
        ch.members.insert(offset, member);
        self.location.insert(client, Location::Small { w, channel: id });
        Placement { client, channel: id, period: w, offset }
    }

    fn place_big(&mut self, mut member: Member, now: Time) -> Placement {
        let period = self.big.period();
        let offset =
            assign_offset(period, now, |o| self.big.members.contains_key(&o)).expect("big channel holds all n clients");
        let client = member.client;
        member.placed_at = now;
        self.big.members.insert(offset, member);
        self.location.insert(client, Location::Big);
        Placement { client, channel: BIG, period, offset }
    }

    // Re-times every big-channel member after a change of period. Growing
    // keeps each member's firing times; shrinking hands out offsets to the
    // members that have waited longest first.
    fn reschedule_big(&mut self, old_period: u64, now: Time) -> Vec<Placement> {
        let new_period = self.big.period();
        let old = std::mem::take(&mut self.big.members);
        let mut placements = Vec::with_capacity(old.len());
        if new_period >= old_period {
            for (offset, mut m) in old {
                let steps = new_period / old_period;
                let o = (0..steps)
                    .map(|k| offset + k * old_period)
                    .min_by_key(|&o| (now + (o + new_period - now % new_period) % new_period, o))
                    .expect("at least one candidate");
                m.placed_at = now;
                placements.push(Placement { client: m.client, channel: BIG, period: new_period, offset: o });
                self.big.members.insert(o, m);
            }
        } else {
            let mut queue: Vec<(Time, ClientId, Member)> =
                old.into_iter().map(|(o, m)| (m.reference(old_period, o, now), m.client, m)).collect();
            queue.sort_by_key(|(r, c, _)| (*r, *c));
            for (_, _, mut m) in queue {
                let o = assign_offset(new_period, now, |o| self.big.members.contains_key(&o))
                    .expect("big channel holds all n clients");
                m.placed_at = now;
                placements.push(Placement { client: m.client, channel: BIG, period: new_period, offset: o });
                self.big.members.insert(o, m);
            }
        }
        placements
    }

    pub fn arrive(&mut self, client: &Client, ctx: &EventCtx) -> Result<StepOutcome, PolicyError> {
        if !client.laxity.is_power_of_two() || (self.strict_pow2 && client.raw_laxity != client.laxity as f64) {
            return Err(PolicyError::NotPowerOfTwo { client: client.id, laxity: client.raw_laxity as u64 });
        }
        if self.location.contains_key(&client.id) {
            return Err(PolicyError::DuplicateClient(client.id));
        }
        let now = ctx.time;
        let mut out = StepOutcome::default();
        self.n += 1;
        let n = self.n;
        let member = Member { client: client.id, laxity: client.laxity, placed_at: now, alloc_n: n };

        if !self.big_enabled {
            out.placements.push(self.place_small(member, now));
            return Ok(out);
        }

        let target = 2 * hyperceiling(n as u64).expect("n >= 1 after an arrival");
        if target > self.big.tau {
            let old_period = self.big.period();
            self.big.tau = target;
            let half = target / 2;
            let mut evicted: Vec<(u64, Member)> = Vec::new();
            self.big.members.retain(|&o, m| {
                if m.laxity < half {
                    evicted.push((o, m.clone()));
                    false
                } else {
                    true
                }
            });
            evicted.sort_by_key(|(_, m)| m.client);
            let count = evicted.len();
            for (_, mut m) in evicted {
                out.witnesses.push(Witness::Evicted { client: m.client, n, n_at_allocation: m.alloc_n });
                m.alloc_n = n;
                let p = self.place_small(m, now);
                out.reallocations.push(ReallocationRecord {
                    round: ctx.round,
                    client: p.client,
                    from: BIG,
                    to: p.channel,
                });
                out.placements.push(p);
            }
            out.witnesses.push(Witness::EvictionBatch { evicted: count, n });
            out.placements.extend(self.reschedule_big(old_period, now));
        }

        let p = if client.laxity >= self.big.tau { self.place_big(member, now) } else { self.place_small(member, now) };
        out.placements.push(p);
        Ok(out)
    }

    pub fn depart(&mut self, client: ClientId, ctx: &EventCtx) -> Result<StepOutcome, PolicyError> {
        let loc = self.location.remove(&client).ok_or(PolicyError::UnknownClient(client))?;
        let now = ctx.time;
        let mut out = StepOutcome::default();
        self.n -= 1;
        let n = self.n;

        match loc {
            Location::Big => {
                let o = self.big.offset_of(client).expect("indexed member");
                self.big.members.remove(&o);
            }
            Location::Small { w, channel } => {
                let ch = self.wchannel_mut(w, channel);
                let freed = ch.offset_of(client).expect("indexed member");
                ch.members.remove(&freed);
                if ch.is_empty() {
                    self.release(w, channel);
                } else if let Some(other) = self
                    .pool(w)
                    .iter()
                    .filter(|c| c.id != channel && !c.is_full())
                    .min_by_key(|c| (c.len(), c.id))
                    .map(|c| c.id)
                {
                    let next = now + (freed + w - now % w) % w;
                    let donor = self.wchannel_mut(w, other);
                    let (&from_offset, _) = donor
                        .members
                        .iter()
                        .min_by_key(|(&o, m)| (next - m.reference(w, o, now).min(next), m.client))
                        .expect("non-empty donor channel");
                    let mut m = donor.members.remove(&from_offset).expect("picked above");
                    let donor_empty = donor.is_empty();
                    m.alloc_n = n;
                    m.placed_at = now;
                    let moved = m.client;
                    self.wchannel_mut(w, channel).members.insert(freed, m);
                    self.location.insert(moved, Location::Small { w, channel });
                    out.reallocations.push(ReallocationRecord {
                        round: ctx.round,
                        client: moved,
                        from: other,
                        to: channel,
                    });
                    out.placements.push(Placement { client: moved, channel, period: w, offset: freed });
                    if donor_empty {
                        self.release(w, other);
                    }
                }
            }
        }

        if !self.big_enabled {
            return Ok(out);
        }
        if n == 0 {
            self.big.tau = 2;
            return Ok(out);
        }
        let target = 2 * hyperceiling(n as u64).expect("n >= 1");
        if target < self.big.tau {
            let old_period = self.big.period();
            self.big.tau = target;
            out.placements.extend(self.reschedule_big(old_period, now));
            let limit = 2 * target;
            let oversized: Vec<u64> = self.pools.range(limit + 1..).map(|(&w, _)| w).collect();
            for w in oversized {
                let channels = self.pools.remove(&w).unwrap_or_default();
                for ch in channels {
                    let mut members: Vec<Member> = ch.members.into_values().collect();
                    members.sort_by_key(|m| m.client);
                    for mut m in members {
                        out.witnesses.push(Witness::Consolidated { client: m.client, n, n_at_allocation: m.alloc_n });
                        m.alloc_n = n;
                        let p = self.place_big(m, now);
                        out.reallocations.push(ReallocationRecord {
                            round: ctx.round,
                            client: p.client,
                            from: ch.id,
                            to: BIG,
                        });
                        out.placements.push(p);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Largest number of non-full channels sharing one laxity.
    pub fn max_nonfull_per_laxity(&self) -> usize {
        self.pools.values().map(|pool| pool.iter().filter(|c| !c.is_full()).count()).max().unwrap_or(0)
    }
}

impl Policy for ClassifiedState {
    fn name(&self) -> &'static str {
        "classified"
    }

    fn on_arrival(&mut self, client: &Client, ctx: &EventCtx) -> Result<StepOutcome, PolicyError> {
        self.arrive(client, ctx)
    }

    fn on_departure(&mut self, client: ClientId, ctx: &EventCtx) -> Result<StepOutcome, PolicyError> {
        self.depart(client, ctx)
    }

    fn channels(&self) -> usize {
        self.channel_count()
    }

    fn facts(&self) -> PolicyFacts {
        PolicyFacts::Classified {
            big_channel: self.big_enabled,
            tau: self.big.tau,
            big_members: self.big.len(),
            big_min_laxity: self.big.members.values().map(|m| m.laxity).min(),
            max_nonfull_per_laxity: self.max_nonfull_per_laxity(),
        }
    }
}
