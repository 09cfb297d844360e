/* tslint:disable */
/* eslint-disable */

/**
 * A model trained on the cubic toy set.
 */
export class ToyRun {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `[lo, hi, count_0, …]`.
     */
    histogram(name: string, index: number, samples: number, bins: number): Float64Array;
    constructor(method: string, steps: number, seed: number);
    ratio(samples: number): number;
    svg(samples: number): string;
    readonly loss: number;
}

/**
 * `[analytical, mean, std, min, max]`.
 */
export function kl_explorer(mu: number, sigma: number, n: number, m: number, repeats: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_toyrun_free: (a: number, b: number) => void;
    readonly kl_explorer: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly toyrun_histogram: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly toyrun_loss: (a: number) => number;
    readonly toyrun_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly toyrun_ratio: (a: number, b: number) => [number, number, number];
    readonly toyrun_svg: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
