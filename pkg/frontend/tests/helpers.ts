/**
 * Fixture plumbing: responses recorded from the real service replayed
 * through the client's injectable fetch.
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { FetchLike } from "../src/api.js";

export interface Fixture {
  status: number;
  body: unknown;
}

const HERE = dirname(fileURLToPath(import.meta.url));

export function fixturePath(name: string): string {
  return join(HERE, "fixtures", `${name}.json`);
}

export function loadFixture(name: string): Fixture {
  return JSON.parse(readFileSync(fixturePath(name), "utf8")) as Fixture;
}

/** The exact characters the recorder wrote, for verbatim-display checks. */
export function rawFixtureText(name: string): string {
  return readFileSync(fixturePath(name), "utf8");
}

export function jsonResponse(fixture: Fixture): Response {
  return new Response(JSON.stringify(fixture.body), {
    status: fixture.status,
    headers: { "Content-Type": "application/json" },
  });
}

export interface RecordedCall {
  url: string;
  init: RequestInit | undefined;
}

/** Fetch stub routing "METHOD url" keys to fixtures and logging every call. */
export function fixtureFetch(routes: Record<string, Fixture>): {
  fetchFn: FetchLike;
  calls: RecordedCall[];
} {
  const calls: RecordedCall[] = [];
  const fetchFn: FetchLike = async (url, init) => {
    calls.push({ url, init });
    const key = `${init?.method ?? "GET"} ${url}`;
    const fixture = routes[key];
    if (!fixture) throw new Error(`unrouted fetch: ${key}`);
    return jsonResponse(fixture);
  };
  return { fetchFn, calls };
}

/** Deterministic PRNG so random-mask tests are reproducible. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}
