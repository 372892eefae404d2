/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON `{pve_mm, visible_pve_mm, hidden_pve_mm}`.
     */
    complete(iterations: number): string;
    depthRgba(): Uint8Array;
    height(): number;
    /**
     * JSON `{points, vertices, matched}`.
     */
    matchUv(eps: number): string;
    constructor(pose_seed: number);
    overlay(): Float64Array;
    render(azimuth_deg: number): void;
    uvRgba(): Uint8Array;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_complete: (a: number, b: number) => [number, number, number, number];
    readonly demo_depthRgba: (a: number) => [number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_matchUv: (a: number, b: number) => [number, number, number, number];
    readonly demo_new: (a: number) => number;
    readonly demo_overlay: (a: number) => [number, number];
    readonly demo_render: (a: number, b: number) => void;
    readonly demo_uvRgba: (a: number) => [number, number];
    readonly demo_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
